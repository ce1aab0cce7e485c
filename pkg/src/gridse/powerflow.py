"""Newton-Raphson AC power flow and synthetic state/measurement time series.

Injection inputs use the package sign rule of :mod:`gridse.grid`: ``P`` is the
active power injected into the network and ``Q`` is ``-Im(S)``, so a PQ bus with
demand ``(Pd, Qd)`` and no generation has ``P = -Pd`` and ``Q = +Qd``.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from gridse.grid import BusKind, CaseData, Network, StateVector
from gridse.measurement import FormStack, MeasurementSet, MeasurementSpec, simulate_measurements

log = logging.getLogger(__name__)


class PowerFlowError(RuntimeError):
    def __init__(self, message: str, mismatch: float, slot: int | None = None):
        super().__init__(message)
        self.mismatch = mismatch
        self.slot = slot


@dataclass
class PowerFlowOptions:
    tol: float = 1e-10
    max_iter: int = 20


def _mismatch(ybus, v, s_spec, pvpq, pq):
    s_calc = v * np.conj(ybus @ v)
    ds = s_spec - s_calc
    return np.concatenate([ds.real[pvpq], ds.imag[pq]])


def newton_powerflow(net: Network, p_inj, q_inj, v_set=None,
                     opts: PowerFlowOptions | None = None):
    """Polar Newton-Raphson from flat start.

    ``v_set`` gives |V| at PV buses and the slack (slack angle is 0).
    Returns ``(state, mismatch_history)`` where the history holds the max-norm
    mismatch before each iteration and after the last one.
    """
    opts = opts or PowerFlowOptions()
    n = net.n_bus
    ybus = net.ybus
    p_inj = np.asarray(p_inj, dtype=float)
    q_inj = np.asarray(q_inj, dtype=float)
    v_set = np.ones(n) if v_set is None else np.asarray(v_set, dtype=float)
    s_spec = p_inj - 1j * q_inj  # standard-convention complex injection

    pv = net.indices(BusKind.PV)
    pq = net.indices(BusKind.PQ)
    pvpq = np.concatenate([pv, pq])
    vm = np.ones(n)
    va = np.zeros(n)
    fixed = np.concatenate([[net.slack], pv])
    vm[fixed] = v_set[fixed]

    v = vm * np.exp(1j * va)
    f = _mismatch(ybus, v, s_spec, pvpq, pq)
    history = [float(np.max(np.abs(f))) if f.size else 0.0]
    it = 0
    while history[-1] > opts.tol:
        if it >= opts.max_iter:
            raise PowerFlowError(
                f"power flow did not converge in {opts.max_iter} iterations "
                f"(mismatch {history[-1]:.3e})", history[-1])
        i_bus = ybus @ v
        vnorm = v / np.abs(v)
        ds_dvm = np.diag(v) @ np.conj(ybus @ np.diag(vnorm)) + np.diag(np.conj(i_bus) * vnorm)
        ds_dva = 1j * np.diag(v) @ np.conj(np.diag(i_bus) - ybus @ np.diag(v))
        jac = np.block([
            [ds_dva.real[np.ix_(pvpq, pvpq)], ds_dvm.real[np.ix_(pvpq, pq)]],
            [ds_dva.imag[np.ix_(pq, pvpq)], ds_dvm.imag[np.ix_(pq, pq)]],
        ])
        try:
            dx = np.linalg.solve(jac, f)
        except np.linalg.LinAlgError:
            raise PowerFlowError("singular power-flow Jacobian", history[-1]) from None
        va[pvpq] += dx[:pvpq.size]
        vm[pq] += dx[pvpq.size:]
        v = vm * np.exp(1j * va)
        f = _mismatch(ybus, v, s_spec, pvpq, pq)
        it += 1
        history.append(float(np.max(np.abs(f))))
        if not np.all(np.isfinite(v)) or not np.isfinite(history[-1]):
            raise PowerFlowError(f"power flow diverged at iteration {it}", np.inf)
    return StateVector.from_complex(v), history


def solve_powerflow(net: Network, p_inj, q_inj, v_set=None,
                    opts: PowerFlowOptions | None = None) -> StateVector:
    return newton_powerflow(net, p_inj, q_inj, v_set, opts)[0]


# --- scenarios --------------------------------------------------------------

@dataclass
class LoadScenario:
    """Per-slot bus data, each array shaped ``(T, N)``."""

    p_demand: np.ndarray
    q_demand: np.ndarray
    p_gen: np.ndarray
    v_set: np.ndarray
    name: str = "custom"

    def __post_init__(self):
        arrs = [np.atleast_2d(np.asarray(a, dtype=float))
                for a in (self.p_demand, self.q_demand, self.p_gen, self.v_set)]
        if len({a.shape for a in arrs}) != 1:
            raise ValueError("scenario series must share one (T, N) shape")
        if not all(np.all(np.isfinite(a)) for a in arrs):
            raise ValueError("scenario contains non-finite values")
        self.p_demand, self.q_demand, self.p_gen, self.v_set = arrs

    @property
    def T(self) -> int:
        return self.p_demand.shape[0]

    def injections(self, t: int):
        """(P, Q, v_set) for slot ``t`` under the package sign rule."""
        return self.p_gen[t] - self.p_demand[t], self.q_demand[t].copy(), self.v_set[t]


SINE_AMPLITUDE = 0.2
SINE_PERIOD = 24
NOISE_LEVEL = 0.02


def daily_factor(T: int) -> np.ndarray:
    t = np.arange(T)
    return 1.0 + SINE_AMPLITUDE * np.sin(2.0 * np.pi * t / SINE_PERIOD)


def builtin_scenario(name: str, case: CaseData, T: int, seed=None) -> LoadScenario:
    """Closed-form load profiles around the case's nominal operating point.

    ``constant``: nominal values every slot.
    ``daily_sine``: demand and PV generation scaled by ``1 + 0.2 sin(2 pi t / 24)``.
    ``daily_sine_noisy``: daily_sine times per-entry factors ``1 + 0.02 e`` with
    ``e`` standard normal clipped to [-3, 3].
    """
    if T < 1:
        raise ValueError("T must be >= 1")
    n = case.net.n_bus
    ones = np.ones((T, 1))
    if name == "constant":
        scale = np.ones((T, n))
    elif name in ("daily_sine", "daily_sine_noisy"):
        scale = daily_factor(T)[:, None] * np.ones((1, n))
    else:
        raise ValueError(f"unknown scenario {name!r}")
    pd = case.p_demand[None, :] * scale
    qd = case.q_demand[None, :] * scale
    pg = case.p_gen[None, :] * scale
    if name == "daily_sine_noisy":
        rng = np.random.default_rng(seed)
        e = lambda: 1.0 + NOISE_LEVEL * np.clip(rng.standard_normal((T, n)), -3.0, 3.0)
        pd, qd, pg = pd * e(), qd * e(), pg * e()
    slack = case.net.slack
    pg[:, slack] = 0.0  # the slack absorbs the imbalance
    return LoadScenario(pd, qd, pg, ones * case.v_set[None, :], name=name)


def write_scenario(scn: LoadScenario, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "bus_id", "P_demand", "Q_demand"])
        for t in range(scn.T):
            for k in range(scn.p_demand.shape[1]):
                w.writerow([t, k + 1, repr(float(scn.p_demand[t, k])), repr(float(scn.q_demand[t, k]))])


def read_scenario(path, case: CaseData) -> LoadScenario:
    """Demand series from CSV; generation and setpoints are the case's nominal values."""
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        for r in csv.DictReader(fh):
            rows.append((int(r["t"]), int(r["bus_id"]), float(r["P_demand"]), float(r["Q_demand"])))
    if not rows:
        raise ValueError(f"{path}: empty scenario")
    T = max(r[0] for r in rows) + 1
    n = case.net.n_bus
    pd = np.zeros((T, n))
    qd = np.zeros((T, n))
    for t, k, p, q in rows:
        pd[t, k - 1], qd[t, k - 1] = p, q
    pg = np.repeat(case.p_gen[None, :], T, axis=0)
    pg[:, case.net.slack] = 0.0
    return LoadScenario(pd, qd, pg, np.repeat(case.v_set[None, :], T, axis=0), name=str(path))


# --- time series ------------------------------------------------------------

@dataclass
class TimeSeriesDataset:
    states: list[StateVector]
    measurements: list[MeasurementSet]
    specs: tuple[MeasurementSpec, ...]
    seed: int | None = None
    scaling: object | None = None
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.states)

    def inputs(self) -> np.ndarray:
        return np.stack([m.z for m in self.measurements])

    def labels(self) -> np.ndarray:
        """Rectangular label blocks ``[vr | vi]`` per slot."""
        return np.stack([s.blocks() for s in self.states])


def slot_rng(seed, t: int) -> np.random.Generator:
    """Per-slot generator so slot results never depend on evaluation order."""
    return np.random.default_rng([0 if seed is None else int(seed), t])


def generate_timeseries(net: Network, scenario: LoadScenario, plan: Sequence[MeasurementSpec],
                        seed=None, noise: bool = True,
                        opts: PowerFlowOptions | None = None) -> TimeSeriesDataset:
    stack = FormStack.build(net, plan)
    states, sets = [], []
    for t in range(scenario.T):
        p, q, vs = scenario.injections(t)
        try:
            v = solve_powerflow(net, p, q, vs, opts)
        except PowerFlowError as exc:
            raise PowerFlowError(f"slot {t}: {exc}", exc.mismatch, slot=t) from exc
        states.append(v)
        sets.append(simulate_measurements(net, v, plan, slot_rng(seed, t), noise=noise, t=t,
                                          stack=stack))
    log.debug("generated %d slots", scenario.T)
    return TimeSeriesDataset(states, sets, tuple(plan), seed,
                             meta={"scenario": scenario.name, "T": scenario.T})
