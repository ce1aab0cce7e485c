"""Minimal numpy neural-network kernel: layers, reverse-mode gradients, Adam."""
from gridse.nn.layers import (LSTM, Activation, BatchNorm1D, Conv1D, Dense, Dropout, Flatten,
                              Layer, OutputAffine, ReLU, Reshape, SimpleRNN, TimeDistributedDense,
                              rnn_step, stacked_rnn_forward)
from gridse.nn.model import (Sequential, StaleCacheError, backward, forward, load_checkpoint,
                             save_checkpoint)
from gridse.nn.optim import AdamState, adam_step, loss
from gridse.nn.train import History, TrainingError, fit

__all__ = [
    "LSTM", "Activation", "BatchNorm1D", "Conv1D", "Dense", "Dropout", "Flatten", "Layer",
    "OutputAffine", "ReLU", "Reshape", "SimpleRNN", "TimeDistributedDense", "rnn_step",
    "stacked_rnn_forward", "Sequential", "StaleCacheError", "forward", "backward",
    "load_checkpoint", "save_checkpoint", "AdamState", "adam_step", "loss", "History",
    "TrainingError", "fit",
]
