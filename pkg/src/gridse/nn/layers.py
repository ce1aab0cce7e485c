"""Layer set for the learned estimators and forecasters.

Layers act on batches: dense-like layers on the last axis, ``Conv1D`` on
``(B, L, C)`` and recurrent layers on ``(B, T, D)``.  ``forward`` returns
``(y, cache)`` and ``backward(cache, dy)`` returns ``(dx, grads)`` where ``grads``
is keyed like ``params``.
"""
from __future__ import annotations

import numpy as np

from gridse import kernels

__all__ = [
    "Layer", "Dense", "TimeDistributedDense", "OutputAffine", "Conv1D", "ReLU", "Activation",
    "Dropout", "BatchNorm1D", "Reshape", "Flatten", "SimpleRNN", "LSTM", "rnn_step",
    "stacked_rnn_forward", "LAYER_TYPES", "glorot_uniform",
]


def glorot_uniform(rng, shape, fan_in, fan_out):
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape)


def _sigmoid(a):
    return 0.5 * (1.0 + np.tanh(0.5 * a))


# name -> (f, f' expressed through the output y)
_ACTIVATIONS = {
    None: (lambda a: a, lambda y: np.ones_like(y)),
    "linear": (lambda a: a, lambda y: np.ones_like(y)),
    "relu": (lambda a: np.maximum(a, 0.0), lambda y: (y > 0).astype(y.dtype)),
    "tanh": (np.tanh, lambda y: 1.0 - y * y),
    "sigmoid": (_sigmoid, lambda y: y * (1.0 - y)),
}


def _activation(name):
    try:
        return _ACTIVATIONS[name]
    except KeyError:
        raise ValueError(f"unknown activation {name!r}") from None


class Layer:
    """Base class; stateless layers only override ``forward``/``backward``."""

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}

    def build(self, in_shape: tuple, rng) -> tuple:
        return in_shape

    def forward(self, x, train=False, rng=None):
        raise NotImplementedError

    def backward(self, cache, dy):
        raise NotImplementedError

    def config(self) -> dict:
        return {}

    def n_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def __repr__(self):
        args = ", ".join(f"{k}={v!r}" for k, v in self.config().items())
        return f"{type(self).__name__}({args})"


class Dense(Layer):
    def __init__(self, units: int, activation: str | None = None):
        super().__init__()
        if units < 1:
            raise ValueError("units must be positive")
        self.units = units
        self.activation = activation
        self._f, self._df = _activation(activation)

    def build(self, in_shape, rng):
        n_in = in_shape[-1]
        self.params = {
            "w": glorot_uniform(rng, (n_in, self.units), n_in, self.units),
            "b": np.zeros(self.units),
        }
        return (*in_shape[:-1], self.units)

    def forward(self, x, train=False, rng=None):
        w = self.params["w"]
        if x.shape[-1] != w.shape[0]:
            raise ValueError(f"expected last dimension {w.shape[0]}, got {x.shape[-1]}")
        y = self._f(x @ w + self.params["b"])
        return y, (x, y)

    def backward(self, cache, dy):
        x, y = cache
        da = dy * self._df(y)
        x2 = x.reshape(-1, x.shape[-1])
        da2 = da.reshape(-1, da.shape[-1])
        grads = {"w": x2.T @ da2, "b": da2.sum(axis=0)}
        return da @ self.params["w"].T, grads

    def config(self):
        return {"units": self.units, "activation": self.activation}


class TimeDistributedDense(Dense):
    """Dense map applied independently at every time step of ``(B, T, D)``."""

    def forward(self, x, train=False, rng=None):
        if x.ndim != 3:
            raise ValueError(f"TimeDistributedDense expects (B, T, D), got shape {x.shape}")
        return super().forward(x, train, rng)


class OutputAffine(Dense):
    """Affine read-out of a hidden state: ``y = s W + b``."""

    def __init__(self, units: int, activation=None):
        super().__init__(units, None)

    def config(self):
        return {"units": self.units}


class Conv1D(Layer):
    """Stride-1 cross-correlation with zero 'same' padding; weights ``(K, C, F)``."""

    def __init__(self, filters: int, kernel: int = 3):
        super().__init__()
        if filters < 1 or kernel < 1:
            raise ValueError("filters and kernel must be positive")
        self.filters = filters
        self.kernel = kernel

    def build(self, in_shape, rng):
        length, chans = in_shape
        k, f = self.kernel, self.filters
        self.params = {
            "w": glorot_uniform(rng, (k, chans, f), k * chans, k * f),
            "b": np.zeros(f),
        }
        return (length, f)

    def forward(self, x, train=False, rng=None):
        w = self.params["w"]
        if x.ndim != 3 or x.shape[2] != w.shape[1]:
            raise ValueError(f"Conv1D expects (B, L, {w.shape[1]}), got shape {x.shape}")
        return kernels.conv1d_forward(x, w, self.params["b"]), x

    def backward(self, cache, dy):
        dx, dw, db = kernels.conv1d_backward(cache, self.params["w"], dy)
        return dx, {"w": dw, "b": db}

    def config(self):
        return {"filters": self.filters, "kernel": self.kernel}


class Activation(Layer):
    def __init__(self, activation: str):
        super().__init__()
        self.activation = activation
        self._f, self._df = _activation(activation)

    def forward(self, x, train=False, rng=None):
        y = self._f(x)
        return y, y

    def backward(self, cache, dy):
        return dy * self._df(cache), {}

    def config(self):
        return {"activation": self.activation}


class ReLU(Activation):
    def __init__(self):
        super().__init__("relu")

    def config(self):
        return {}


class Dropout(Layer):
    """Inverted dropout: kept units are scaled by ``1 / (1 - rate)`` in training."""

    def __init__(self, rate: float):
        super().__init__()
        if not 0.0 <= rate < 1.0:
            raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = rate

    def forward(self, x, train=False, rng=None):
        if not train or self.rate == 0.0:
            return x, None
        if rng is None:
            raise ValueError("Dropout in train mode needs a random generator")
        mask = (rng.random(x.shape) >= self.rate) / (1.0 - self.rate)
        return x * mask, mask

    def backward(self, cache, dy):
        return (dy if cache is None else dy * cache), {}

    def config(self):
        return {"rate": self.rate}


class BatchNorm1D(Layer):
    """Per-feature normalization over every axis but the last."""

    def __init__(self, momentum: float = 0.99, eps: float = 1e-8):
        super().__init__()
        self.momentum = momentum
        self.eps = eps

    def build(self, in_shape, rng):
        f = in_shape[-1]
        self.params = {"gamma": np.ones(f), "beta": np.zeros(f)}
        self.buffers = {"running_mean": np.zeros(f), "running_var": np.ones(f)}
        return in_shape

    def forward(self, x, train=False, rng=None):
        axes = tuple(range(x.ndim - 1))
        if train:
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            m = self.momentum
            self.buffers["running_mean"] = m * self.buffers["running_mean"] + (1 - m) * mean
            self.buffers["running_var"] = m * self.buffers["running_var"] + (1 - m) * var
        else:
            mean, var = self.buffers["running_mean"], self.buffers["running_var"]
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean) * inv
        y = self.params["gamma"] * xhat + self.params["beta"]
        return y, (xhat, inv, train)

    def backward(self, cache, dy):
        xhat, inv, train = cache
        axes = tuple(range(dy.ndim - 1))
        grads = {"gamma": (dy * xhat).sum(axis=axes), "beta": dy.sum(axis=axes)}
        dxhat = dy * self.params["gamma"]
        if not train:
            return dxhat * inv, grads
        n = dy.size // dy.shape[-1]
        dx = inv / n * (n * dxhat - dxhat.sum(axis=axes) - xhat * (dxhat * xhat).sum(axis=axes))
        return dx, grads

    def config(self):
        return {"momentum": self.momentum, "eps": self.eps}


class Reshape(Layer):
    def __init__(self, shape):
        super().__init__()
        self.shape = tuple(int(s) for s in shape)

    def build(self, in_shape, rng):
        if int(np.prod(in_shape)) != int(np.prod(self.shape)):
            raise ValueError(f"cannot reshape {in_shape} to {self.shape}")
        return self.shape

    def forward(self, x, train=False, rng=None):
        return x.reshape(x.shape[0], *self.shape), x.shape

    def backward(self, cache, dy):
        return dy.reshape(cache), {}

    def config(self):
        return {"shape": list(self.shape)}


class Flatten(Layer):
    def build(self, in_shape, rng):
        return (int(np.prod(in_shape)),)

    def forward(self, x, train=False, rng=None):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, cache, dy):
        return dy.reshape(cache), {}


# --- recurrent layers -------------------------------------------------------

def rnn_step(cell: "SimpleRNN", x_t, s_prev):
    """One recurrence ``s_t = f(x_t W_in + s_prev W_rec + b)``."""
    p = cell.params
    if x_t.shape[-1] != p["w_in"].shape[0] or s_prev.shape[-1] != p["w_rec"].shape[0]:
        raise ValueError(f"rnn_step shape mismatch: x {x_t.shape}, s {s_prev.shape}")
    return cell._f(x_t @ p["w_in"] + s_prev @ p["w_rec"] + p["b"])


class SimpleRNN(Layer):
    def __init__(self, units: int, activation: str = "tanh", return_sequences: bool = False):
        super().__init__()
        self.units = units
        self.activation = activation
        self.return_sequences = return_sequences
        self._f, self._df = _activation(activation)

    def build(self, in_shape, rng):
        steps, d = in_shape
        h = self.units
        self.params = {
            "w_in": glorot_uniform(rng, (d, h), d, h),
            "w_rec": glorot_uniform(rng, (h, h), h, h),
            "b": np.zeros(h),
        }
        return (steps, h) if self.return_sequences else (h,)

    def initial_state(self, batch):
        return np.zeros((batch, self.units))

    def forward(self, x, train=False, rng=None, s0=None):
        if x.ndim != 3:
            raise ValueError(f"SimpleRNN expects (B, T, D), got shape {x.shape}")
        batch, steps, _ = x.shape
        s = self.initial_state(batch) if s0 is None else s0
        states = np.empty((batch, steps + 1, self.units))
        states[:, 0] = s
        for t in range(steps):
            s = rnn_step(self, x[:, t], s)
            states[:, t + 1] = s
        y = states[:, 1:] if self.return_sequences else states[:, -1]
        return y, (x, states)

    def backward(self, cache, dy):
        x, states = cache
        p = self.params
        batch, steps, _ = x.shape
        dx = np.empty_like(x)
        g = {k: np.zeros_like(v) for k, v in p.items()}
        dh_next = np.zeros((batch, self.units))
        for t in range(steps - 1, -1, -1):
            dh = dh_next.copy()
            if self.return_sequences:
                dh += dy[:, t]
            elif t == steps - 1:
                dh += dy
            da = dh * self._df(states[:, t + 1])
            g["w_in"] += x[:, t].T @ da
            g["w_rec"] += states[:, t].T @ da
            g["b"] += da.sum(axis=0)
            dx[:, t] = da @ p["w_in"].T
            dh_next = da @ p["w_rec"].T
        return dx, g

    def config(self):
        return {"units": self.units, "activation": self.activation,
                "return_sequences": self.return_sequences}


def stacked_rnn_forward(cells, x, s_init=None):
    """Unrolled deep RNN: layer ``l`` at time ``t`` reads layer ``l-1`` at time ``t``.

    ``x`` is ``(T, D)`` or ``(B, T, D)``; returns one ``(B, T, H_l)`` array per layer
    (batch axis dropped again for 2-D input).
    """
    squeeze = x.ndim == 2
    if squeeze:
        x = x[None]
    batch, steps, _ = x.shape
    s = [c.initial_state(batch) if s_init is None else s_init[l] for l, c in enumerate(cells)]
    out = [np.empty((batch, steps, c.units)) for c in cells]
    for t in range(steps):
        below = x[:, t]
        for l, cell in enumerate(cells):
            s[l] = rnn_step(cell, below, s[l])
            out[l][:, t] = s[l]
            below = s[l]
    return [o[0] for o in out] if squeeze else out


class LSTM(Layer):
    """Four-gate LSTM (input, forget, candidate, output); forget bias starts at 1."""

    def __init__(self, units: int, return_sequences: bool = False):
        super().__init__()
        self.units = units
        self.return_sequences = return_sequences

    def build(self, in_shape, rng):
        steps, d = in_shape
        h = self.units
        b = np.zeros(4 * h)
        b[h:2 * h] = 1.0
        self.params = {
            "w_in": glorot_uniform(rng, (d, 4 * h), d, 4 * h),
            "w_rec": glorot_uniform(rng, (h, 4 * h), h, 4 * h),
            "b": b,
        }
        return (steps, h) if self.return_sequences else (h,)

    def forward(self, x, train=False, rng=None):
        if x.ndim != 3:
            raise ValueError(f"LSTM expects (B, T, D), got shape {x.shape}")
        p = self.params
        batch, steps, _ = x.shape
        h_ = self.units
        hs = np.zeros((batch, steps + 1, h_))
        cs = np.zeros((batch, steps + 1, h_))
        gates = np.empty((batch, steps, 4 * h_))
        for t in range(steps):
            a = x[:, t] @ p["w_in"] + hs[:, t] @ p["w_rec"] + p["b"]
            g = np.empty_like(a)
            g[:, :2 * h_] = _sigmoid(a[:, :2 * h_])
            g[:, 2 * h_:3 * h_] = np.tanh(a[:, 2 * h_:3 * h_])
            g[:, 3 * h_:] = _sigmoid(a[:, 3 * h_:])
            i, f, c_hat, o = np.split(g, 4, axis=1)
            cs[:, t + 1] = f * cs[:, t] + i * c_hat
            hs[:, t + 1] = o * np.tanh(cs[:, t + 1])
            gates[:, t] = g
        y = hs[:, 1:] if self.return_sequences else hs[:, -1]
        return y, (x, hs, cs, gates)

    def backward(self, cache, dy):
        x, hs, cs, gates = cache
        p = self.params
        batch, steps, _ = x.shape
        dx = np.empty_like(x)
        g = {k: np.zeros_like(v) for k, v in p.items()}
        dh_next = np.zeros((batch, self.units))
        dc_next = np.zeros((batch, self.units))
        for t in range(steps - 1, -1, -1):
            dh = dh_next.copy()
            if self.return_sequences:
                dh += dy[:, t]
            elif t == steps - 1:
                dh += dy
            i, f, c_hat, o = np.split(gates[:, t], 4, axis=1)
            tc = np.tanh(cs[:, t + 1])
            dc = dc_next + dh * o * (1.0 - tc * tc)
            da = np.concatenate([
                dc * c_hat * i * (1.0 - i),
                dc * cs[:, t] * f * (1.0 - f),
                dc * i * (1.0 - c_hat * c_hat),
                dh * tc * o * (1.0 - o),
            ], axis=1)
            g["w_in"] += x[:, t].T @ da
            g["w_rec"] += hs[:, t].T @ da
            g["b"] += da.sum(axis=0)
            dx[:, t] = da @ p["w_in"].T
            dh_next = da @ p["w_rec"].T
            dc_next = dc * f
        return dx, g

    def config(self):
        return {"units": self.units, "return_sequences": self.return_sequences}


LAYER_TYPES = {cls.__name__: cls for cls in (
    Dense, TimeDistributedDense, OutputAffine, Conv1D, ReLU, Activation, Dropout, BatchNorm1D,
    Reshape, Flatten, SimpleRNN, LSTM)}
