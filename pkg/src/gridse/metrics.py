"""Error metrics for state vectors."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class MetricReport:
    """``nrmse``: mean over samples of ``||pred - truth||^2 / N`` with N buses
    (half the vector length).  ``rmse_true``: root of the mean squared entry error.
    """

    nrmse: float
    rmse_true: float
    per_sample: np.ndarray

    def as_dict(self):
        return {"nrmse": self.nrmse, "rmse_true": self.rmse_true}


def metric_nrmse(pred, truth) -> MetricReport:
    pred = np.atleast_2d(np.asarray(pred, dtype=float))
    truth = np.atleast_2d(np.asarray(truth, dtype=float))
    if pred.shape != truth.shape:
        raise ValueError(f"prediction shape {pred.shape} != truth shape {truth.shape}")
    if pred.size == 0:
        raise ValueError("no samples to score")
    n_bus = pred.shape[1] / 2
    err2 = (pred - truth) ** 2
    per_sample = err2.sum(axis=1) / n_bus
    return MetricReport(float(per_sample.mean()), float(np.sqrt(err2.mean())), per_sample)
