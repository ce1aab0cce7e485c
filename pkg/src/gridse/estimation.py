"""Static state estimation on the quadratic measurement model.

Two estimators share one interface: ``estimator(ms, stack, opts) -> EstimateReport``.

* :func:`wls_gauss_newton` minimizes ``sum((z - h(x)) / sigma)^2`` with damped
  Gauss-Newton steps.
* :func:`lav_prox_linear` minimizes ``mean|z - h(x)|``.  Each outer step linearizes
  the residuals and solves the proximal subproblem
  ``min_d mean|r - J d| + ||d||^2 / (2 mu)`` by IRLS.

The slack bus imaginary part is pinned to zero in both.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from gridse.grid import StateVector
from gridse.measurement import (ErrorClass, FormStack, MeasurementSet, _reduced_flat_jacobian,
                                classify_error, numerical_rank)


class EstimationError(RuntimeError):
    pass


@dataclass
class EstimatorOptions:
    max_outer: int = 50
    tol: float = 1e-8
    prox_mu: float = 1.0
    irls_eps: float = 1e-6
    irls_max: int = 30
    init: StateVector | None = None  # None means flat start

    def __post_init__(self):
        for name in ("max_outer", "tol", "prox_mu", "irls_eps", "irls_max"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")


@dataclass
class EstimateReport:
    v_hat: StateVector
    converged: bool
    iterations: int
    residuals: np.ndarray
    objective_trace: list[float]
    step_trace: list[float] = field(default_factory=list)
    method: str = ""
    flagged: tuple[int, ...] = ()


def _check_observable(stack: FormStack):
    if numerical_rank(_reduced_flat_jacobian(stack)) < stack.dim - 1:
        raise EstimationError("unobservable or degenerate measurement set")


def _setup(ms: MeasurementSet, stack: FormStack, opts: EstimatorOptions):
    if len(ms) != len(stack):
        raise ValueError(f"{len(ms)} measurements but {len(stack)} forms")
    _check_observable(stack)
    n_bus = stack.dim // 2
    x = (opts.init or StateVector.flat(n_bus)).interleaved().copy()
    free = np.ones(stack.dim, dtype=bool)
    if stack.ref_index is not None:
        free[stack.ref_index] = False
        x[stack.ref_index] = 0.0
    return x, free


def _report(x, ms, stack, converged, it, trace, steps, method):
    return EstimateReport(StateVector.from_interleaved(x), converged, it,
                          ms.z - stack.evaluate(x), trace, steps, method)


def wls_gauss_newton(ms: MeasurementSet, stack: FormStack,
                     opts: EstimatorOptions | None = None) -> EstimateReport:
    opts = opts or EstimatorOptions()
    x, free = _setup(ms, stack, opts)
    inv_sigma = 1.0 / ms.sigma

    def objective(xx):
        return float(np.sum(((ms.z - stack.evaluate(xx)) * inv_sigma) ** 2))

    obj = objective(x)
    trace, steps = [obj], []
    converged = False
    it = 0
    for it in range(1, opts.max_outer + 1):
        rw = (ms.z - stack.evaluate(x)) * inv_sigma
        jw = stack.jacobian(x)[:, free] * inv_sigma[:, None]
        try:
            dx = cho_solve(cho_factor(jw.T @ jw), jw.T @ rw)
        except (LinAlgError, ValueError):
            raise EstimationError("unobservable or degenerate normal equations") from None
        step = np.zeros_like(x)
        step[free] = dx
        alpha = 1.0
        for _ in range(21):
            cand = x + alpha * step
            new_obj = objective(cand)
            if new_obj <= obj:
                break
            alpha *= 0.5
        else:
            cand, new_obj = x, obj
        steps.append(float(np.linalg.norm(alpha * dx)))
        x, obj = cand, new_obj
        trace.append(obj)
        if np.linalg.norm(dx) < opts.tol or steps[-1] == 0.0:
            converged = np.linalg.norm(dx) < opts.tol
            break
    return _report(x, ms, stack, converged, it, trace, steps, "wls")


def _irls_prox(jac, r, mu, eps, n_iter):
    """Solve ``min_d mean|r - J d| + ||d||^2 / (2 mu)`` by reweighted least squares."""
    m, n = jac.shape
    d = np.zeros(n)
    reg = np.eye(n) / mu
    for _ in range(n_iter):
        c = r - jac @ d
        w = 1.0 / np.maximum(np.abs(c), eps) / m
        jw = jac * w[:, None]
        d_new = np.linalg.solve(jac.T @ jw + reg, jw.T @ r)
        done = np.linalg.norm(d_new - d) <= 1e-13 * max(1.0, np.linalg.norm(d_new))
        d = d_new
        if done:
            break
    return d


def lav_prox_linear(ms: MeasurementSet, stack: FormStack,
                    opts: EstimatorOptions | None = None) -> EstimateReport:
    opts = opts or EstimatorOptions()
    x, free = _setup(ms, stack, opts)

    def objective(xx):
        return float(np.mean(np.abs(ms.z - stack.evaluate(xx))))

    obj = objective(x)
    trace, steps = [obj], []
    converged = False
    it = 0
    for it in range(1, opts.max_outer + 1):
        r = ms.z - stack.evaluate(x)
        jac = stack.jacobian(x)[:, free]
        mu = opts.prox_mu
        accepted = False
        for _ in range(21):
            d = _irls_prox(jac, r, mu, opts.irls_eps, opts.irls_max)
            cand = x.copy()
            cand[free] += d
            new_obj = objective(cand)
            if new_obj <= obj:
                accepted = True
                break
            mu *= 0.5
        step_norm = float(np.linalg.norm(d))
        if not accepted:
            steps.append(0.0)
            converged = step_norm < opts.tol
            break
        x, obj = cand, new_obj
        trace.append(obj)
        steps.append(step_norm)
        if step_norm < opts.tol:
            converged = True
            break
    return _report(x, ms, stack, converged, it, trace, steps, "lav")


def critical_measurements(stack: FormStack, sigma) -> list[int]:
    """Indices whose removal would make the flat-start Jacobian rank deficient."""
    jw = _reduced_flat_jacobian(stack) / np.asarray(sigma)[:, None]
    q, rr = np.linalg.qr(jw)
    keep = np.abs(np.diag(rr)) > 1e-10 * np.abs(rr).max()
    leverage = np.sum(q[:, keep] ** 2, axis=1)
    return [int(i) for i in np.nonzero(leverage > 1.0 - 1e-8)[0]]


def bad_data_loop(ms: MeasurementSet, stack: FormStack, opts: EstimatorOptions | None = None):
    """Largest-normalized-residual elimination on top of WLS.

    While any ``|r_m| / sigma_m`` classifies as Gross or Extreme, the largest one is
    dropped and the state re-estimated.  An entry whose removal would break
    observability is kept and flagged, and the loop stops.  Measurements that are
    critical in the final set are flagged as well, since their errors cannot show
    up in the residuals.

    Returns ``(report, removed)``; ``report.residuals`` covers all input entries
    and ``report.flagged`` holds original indices.
    """
    opts = opts or EstimatorOptions()
    active = list(range(len(ms)))
    removed: list[int] = []
    flagged: list[int] = []
    full_rank = stack.dim - 1
    while True:
        sub_ms, sub_stack = ms.take(active), stack.subset(active)
        rep = wls_gauss_newton(sub_ms, sub_stack, opts)
        norm = np.abs(rep.residuals) / sub_ms.sigma
        bad = [classify_error(r, s) is not ErrorClass.NORMAL
               for r, s in zip(rep.residuals, sub_ms.sigma)]
        if not any(bad):
            break
        j = int(np.argmax(norm))
        cand = active[:j] + active[j + 1:]
        if numerical_rank(_reduced_flat_jacobian(stack.subset(cand))) < full_rank:
            flagged.append(active[j])
            break
        removed.append(active[j])
        active = cand
    for i in critical_measurements(stack.subset(active), ms.sigma[active]):
        if active[i] not in flagged:
            flagged.append(active[i])
    x = rep.v_hat.interleaved()
    rep.residuals = ms.z - stack.evaluate(x)
    rep.flagged = tuple(sorted(flagged))
    rep.method = "wls+bad-data"
    return rep, removed
