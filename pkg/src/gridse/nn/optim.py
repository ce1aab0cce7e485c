"""Adam updates and regression losses."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    u: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState):
    """Bias-corrected Adam; updates ``params`` arrays in place and returns ``(params, state)``."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for key, theta in params.items():
        g = grads.get(key)
        if g is None:
            continue
        if g.shape != theta.shape:
            raise ValueError(f"{key}: gradient shape {g.shape} != parameter shape {theta.shape}")
        m = state.m.get(key)
        if m is None:
            m = state.m[key] = np.zeros_like(theta)
            state.u[key] = np.zeros_like(theta)
        u = state.u[key]
        m *= b1
        m += (1.0 - b1) * g
        u *= b2
        u += (1.0 - b2) * g * g
        theta -= state.lr * (m / c1) / (np.sqrt(u / c2) + state.eps)
    return params, state


def loss(kind: str, y, target):
    """``(value, dvalue/dy)`` for 'MAE' or 'MSE' averaged over every entry.

    The MAE subgradient is 0 where ``y == target``.
    """
    y = np.asarray(y, dtype=float)
    target = np.asarray(target, dtype=float)
    if y.shape != target.shape:
        raise ValueError(f"loss shape mismatch: {y.shape} vs {target.shape}")
    diff = y - target
    n = diff.size
    kind = kind.upper()
    if kind == "MAE":
        return float(np.mean(np.abs(diff))), np.sign(diff) / n
    if kind == "MSE":
        return float(np.mean(diff * diff)), 2.0 * diff / n
    raise ValueError(f"unknown loss {kind!r}")
