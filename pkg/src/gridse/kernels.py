"""Hot numerical kernels with a compiled backend and a numpy fallback.

The compiled module ``gridse._kernels`` is used when it imports cleanly, unless the
environment variable ``GRIDSE_PURE_PYTHON`` is set to a non-empty value. The numpy
implementations stay importable as ``py_*`` for benchmarking and cross-checking.

Quadratic-form stacks are stored as concatenated coordinate lists: form ``m`` owns
entries ``ptr[m]:ptr[m+1]`` of ``rows``, ``cols`` and ``vals``.
"""
from __future__ import annotations

import os

import numpy as np

__all__ = [
    "BACKEND",
    "quad_eval",
    "quad_jacobian",
    "conv1d_forward",
    "conv1d_backward",
    "py_quad_eval",
    "py_quad_jacobian",
    "py_conv1d_forward",
    "py_conv1d_backward",
]


def _form_ids(ptr):
    return np.repeat(np.arange(len(ptr) - 1), np.diff(ptr))


def py_quad_eval(ptr, rows, cols, vals, x):
    prod = vals * x[rows] * x[cols]
    return np.bincount(_form_ids(ptr), weights=prod, minlength=len(ptr) - 1)


def py_quad_jacobian(ptr, rows, cols, vals, x):
    n_forms, n = len(ptr) - 1, len(x)
    flat = _form_ids(ptr) * n + rows
    out = np.bincount(flat, weights=2.0 * vals * x[cols], minlength=n_forms * n)
    return out.reshape(n_forms, n)


def _shifted_rows(a, k):
    # zero-pad each sample for 'same' output, then flatten the batch to rows
    batch, length, chans = a.shape
    left = (k - 1) // 2
    ap = np.zeros((batch, length + k - 1, chans))
    ap[:, left:left + length] = a
    return ap.reshape(-1, chans)


def py_conv1d_forward(x, w, b):
    """Each tap is one matrix product over the flattened, padded batch."""
    k, c, f = w.shape
    batch, length, _ = x.shape
    flat = _shifted_rows(x, k)
    n_rows = len(flat) - k + 1
    full = np.zeros((len(flat), f))
    for j in range(k):
        full[:n_rows] += flat[j:j + n_rows] @ w[j]
    return full.reshape(batch, length + k - 1, f)[:, :length] + b


def py_conv1d_backward(x, w, dy):
    k, c, f = w.shape
    batch, length, _ = x.shape
    left = (k - 1) // 2
    flat = _shifted_rows(x, k)
    n_rows = len(flat) - k + 1
    dyp = np.zeros((batch, length + k - 1, f))
    dyp[:, :length] = dy
    dflat = dyp.reshape(-1, f)[:n_rows]
    dw = np.empty_like(w)
    dxp = np.zeros_like(flat)
    for j in range(k):
        dw[j] = flat[j:j + n_rows].T @ dflat
        dxp[j:j + n_rows] += dflat @ w[j].T
    dx = dxp.reshape(batch, length + k - 1, c)[:, left:left + length]
    return dx, dw, dy.sum(axis=(0, 1))


_ext = None
if not os.environ.get("GRIDSE_PURE_PYTHON"):
    try:
        from gridse import _kernels as _ext
    except ImportError:  # extension not built
        _ext = None

BACKEND = "cython" if _ext is not None else "python"


def _c(a, dtype=np.float64):
    return np.ascontiguousarray(a, dtype=dtype)


if _ext is not None:

    def quad_eval(ptr, rows, cols, vals, x):
        return _ext.quad_eval(_c(ptr, np.int64), _c(rows, np.int64), _c(cols, np.int64),
                              _c(vals), _c(x))

    def quad_jacobian(ptr, rows, cols, vals, x):
        return _ext.quad_jacobian(_c(ptr, np.int64), _c(rows, np.int64), _c(cols, np.int64),
                                  _c(vals), _c(x))

    def conv1d_forward(x, w, b):
        return _ext.conv1d_forward(_c(x), _c(w), _c(b))

    def conv1d_backward(x, w, dy):
        return _ext.conv1d_backward(_c(x), _c(w), _c(dy))

else:
    quad_eval = py_quad_eval
    quad_jacobian = py_quad_jacobian
    conv1d_forward = py_conv1d_forward
    conv1d_backward = py_conv1d_backward
