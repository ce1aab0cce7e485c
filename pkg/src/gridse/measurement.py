"""SCADA measurements as quadratic forms in the rectangular state.

Every measured quantity ``z_m`` is modelled as ``x^T H_m x + noise`` where ``x`` is
the interleaved state ``[vr_1, vi_1, ..., vr_N, vi_N]``.
"""
from __future__ import annotations

import csv
import enum
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from gridse import kernels
from gridse.grid import Network, NetworkError, StateVector

__all__ = [
    "MeasurementType", "MeasurementSpec", "QuadraticForm", "FormStack", "MeasurementSet",
    "ErrorClass", "build_quadratic_form", "evaluate", "jacobian_row", "direct_value",
    "simulate_measurements", "classify_error", "prefilter", "observability_check",
    "Observability", "full_plan", "DEFAULT_SIGMA",
]


class MeasurementType(str, enum.Enum):
    VMAG_SQ = "VMAG_SQ"
    P_INJ = "P_INJ"
    Q_INJ = "Q_INJ"
    PF_FWD = "PF_FWD"
    QF_FWD = "QF_FWD"
    PF_TERM = "PF_TERM"
    QF_TERM = "QF_TERM"

    @property
    def at_bus(self) -> bool:
        return self in (MeasurementType.VMAG_SQ, MeasurementType.P_INJ, MeasurementType.Q_INJ)


DEFAULT_SIGMA = {t: 0.01 for t in MeasurementType}
DEFAULT_SIGMA[MeasurementType.VMAG_SQ] = 0.004


@dataclass(frozen=True)
class MeasurementSpec:
    mtype: MeasurementType
    location: int  # bus id or line id, depending on mtype
    sigma: float = 0.01

    def __post_init__(self):
        object.__setattr__(self, "mtype", MeasurementType(self.mtype))
        object.__setattr__(self, "location", int(self.location))
        if not self.sigma > 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")


@dataclass(frozen=True)
class QuadraticForm:
    """Symmetric ``dim x dim`` matrix in coordinate form (duplicates already merged)."""

    rows: np.ndarray
    cols: np.ndarray
    vals: np.ndarray
    dim: int

    @classmethod
    def from_dense(cls, h: np.ndarray) -> "QuadraticForm":
        h = np.asarray(h, dtype=float)
        if not np.array_equal(h, h.T):
            h = 0.5 * (h + h.T)
        r, c = np.nonzero(h)
        return cls(r.astype(np.int64), c.astype(np.int64), h[r, c], h.shape[0])

    def to_dense(self) -> np.ndarray:
        h = np.zeros((self.dim, self.dim))
        np.add.at(h, (self.rows, self.cols), self.vals)
        return h

    @property
    def nnz(self) -> int:
        return self.vals.size


def _x(v, dim=None) -> np.ndarray:
    x = v.interleaved() if isinstance(v, StateVector) else np.asarray(v, dtype=float)
    if dim is not None and x.shape != (dim,):
        raise ValueError(f"state dimension {x.shape} does not match form dimension {dim}")
    return x


def evaluate(form: QuadraticForm, v) -> float:
    x = _x(v, form.dim)
    return float(np.sum(form.vals * x[form.rows] * x[form.cols]))


def jacobian_row(form: QuadraticForm, v) -> np.ndarray:
    """Gradient ``2 H x`` of the form at ``v``."""
    x = _x(v, form.dim)
    g = np.zeros(form.dim)
    np.add.at(g, form.rows, 2.0 * form.vals * x[form.cols])
    return g


class _Builder:
    """Accumulates ``Re(c * V_a * conj(V_b))`` terms into a raw 2N x 2N matrix."""

    def __init__(self, n_bus: int):
        self.h = np.zeros((2 * n_bus, 2 * n_bus))

    def add(self, c: complex, a: int, b: int):
        # V_a conj(V_b) = A + jC, A = ar*br + ai*bi, C = ai*br - ar*bi
        ar, ai, br, bi = 2 * a, 2 * a + 1, 2 * b, 2 * b + 1
        h = self.h
        h[ar, br] += c.real
        h[ai, bi] += c.real
        h[ai, br] -= c.imag
        h[ar, bi] += c.imag

    def form(self) -> QuadraticForm:
        return QuadraticForm.from_dense(self.h)


def build_quadratic_form(net: Network, spec: MeasurementSpec) -> QuadraticForm:
    n = net.n_bus
    t = spec.mtype
    bld = _Builder(n)
    # reactive quantities: Q = -Im(S) = Re(j S)
    rot = 1j if t in (MeasurementType.Q_INJ, MeasurementType.QF_FWD, MeasurementType.QF_TERM) else 1.0
    if t.at_bus:
        if not 1 <= spec.location <= n:
            raise NetworkError(f"{t.value}: unknown bus id {spec.location}")
        k = spec.location - 1
        if t is MeasurementType.VMAG_SQ:
            bld.add(1.0, k, k)
        else:
            y = net.ybus[k]
            for j in np.nonzero(y)[0]:
                bld.add(rot * np.conj(y[j]), k, int(j))
    else:
        ln = net.line(spec.location)
        a, o = ln.from_bus - 1, ln.to_bus - 1
        if t in (MeasurementType.PF_TERM, MeasurementType.QF_TERM):
            a, o = o, a
        ys = ln.admittance
        # S = V_a conj(ys (V_a - V_o) + j b/2 V_a)
        bld.add(rot * np.conj(ys + 0.5j * ln.charging), a, a)
        bld.add(rot * -np.conj(ys), a, o)
    return bld.form()


def direct_value(net: Network, v: StateVector, spec: MeasurementSpec) -> float:
    """The measured quantity evaluated with complex arithmetic (no quadratic form)."""
    from gridse.grid import LineEnd, line_flow, power_injection

    t = spec.mtype
    if t is MeasurementType.VMAG_SQ:
        k = spec.location - 1
        return float(v.vr[k] ** 2 + v.vi[k] ** 2)
    if t in (MeasurementType.P_INJ, MeasurementType.Q_INJ):
        p, q = power_injection(net, v, spec.location)
        return p if t is MeasurementType.P_INJ else q
    end = LineEnd.FORWARD if t in (MeasurementType.PF_FWD, MeasurementType.QF_FWD) else LineEnd.TERMINAL
    p, q = line_flow(net, v, spec.location, end)
    return p if t in (MeasurementType.PF_FWD, MeasurementType.PF_TERM) else q


class FormStack:
    """All forms of a measurement plan packed for batched evaluation.

    ``ref_index`` is the interleaved coordinate of the slack bus imaginary part,
    which the estimators pin to zero.
    """

    def __init__(self, forms: Sequence[QuadraticForm], ref_index: int | None = None):
        if not forms:
            raise ValueError("empty form list")
        self.forms = list(forms)
        self.dim = forms[0].dim
        sizes = [f.nnz for f in forms]
        self.ptr = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)
        self.rows = np.concatenate([f.rows for f in forms]).astype(np.int64)
        self.cols = np.concatenate([f.cols for f in forms]).astype(np.int64)
        self.vals = np.concatenate([f.vals for f in forms]).astype(float)
        self.ref_index = ref_index

    @classmethod
    def build(cls, net: Network, specs: Sequence[MeasurementSpec]) -> "FormStack":
        return cls([build_quadratic_form(net, s) for s in specs], ref_index=2 * net.slack + 1)

    def __len__(self):
        return len(self.forms)

    def subset(self, idx) -> "FormStack":
        return FormStack([self.forms[i] for i in idx], self.ref_index)

    def evaluate(self, v) -> np.ndarray:
        return kernels.quad_eval(self.ptr, self.rows, self.cols, self.vals, _x(v, self.dim))

    def jacobian(self, v) -> np.ndarray:
        return kernels.quad_jacobian(self.ptr, self.rows, self.cols, self.vals, _x(v, self.dim))


@dataclass(frozen=True)
class MeasurementSet:
    specs: tuple[MeasurementSpec, ...]
    z: np.ndarray
    t: int = 0

    def __post_init__(self):
        object.__setattr__(self, "specs", tuple(self.specs))
        z = np.asarray(self.z, dtype=float).reshape(-1)
        if z.size != len(self.specs):
            raise ValueError(f"{z.size} values for {len(self.specs)} measurement specs")
        object.__setattr__(self, "z", z)

    @property
    def sigma(self) -> np.ndarray:
        return np.array([s.sigma for s in self.specs])

    def __len__(self):
        return len(self.specs)

    def take(self, idx) -> "MeasurementSet":
        idx = list(idx)
        return MeasurementSet(tuple(self.specs[i] for i in idx), self.z[idx], self.t)


def full_plan(net: Network, target: int | None = None,
              sigma: Mapping[MeasurementType, float] | None = None) -> list[MeasurementSpec]:
    """Every measurement type at every bus and line, optionally thinned to ``target``.

    Thinning is a round-robin over the seven type families: the k-th pass takes the
    k-th location of each family that still has one, until ``target`` specs are taken.
    """
    sig = dict(DEFAULT_SIGMA)
    if sigma:
        sig.update(sigma)
    families = []
    for t in MeasurementType:
        locs = range(1, (net.n_bus if t.at_bus else net.n_line) + 1)
        families.append([MeasurementSpec(t, k, sig[t]) for k in locs])
    if target is None:
        return [s for fam in families for s in fam]
    total = sum(len(f) for f in families)
    if not 1 <= target <= total:
        raise ValueError(f"target {target} outside 1..{total}")
    chosen = []
    k = 0
    while len(chosen) < target:
        for fam in families:
            if k < len(fam) and len(chosen) < target:
                chosen.append(fam[k])
        k += 1
    order = {s: i for i, s in enumerate(s for fam in families for s in fam)}
    return sorted(chosen, key=order.__getitem__)


def simulate_measurements(net: Network, v: StateVector, specs: Sequence[MeasurementSpec],
                          seed=None, noise: bool = True, t: int = 0,
                          stack: FormStack | None = None) -> MeasurementSet:
    """``z_m = x^T H_m x + e_m`` with ``e_m ~ N(0, sigma_m^2)`` from ``default_rng(seed)``."""
    stack = stack or FormStack.build(net, specs)
    z = stack.evaluate(v)
    if noise:
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        z = z + rng.standard_normal(len(specs)) * np.array([s.sigma for s in specs])
    return MeasurementSet(tuple(specs), z, t)


class ErrorClass(str, enum.Enum):
    NORMAL = "Normal"
    GROSS = "Gross"
    EXTREME = "Extreme"


def classify_error(residual: float, sigma: float) -> ErrorClass:
    """Normal below 5 sigma, Gross on [5, 20] sigma inclusive, Extreme beyond."""
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    r = abs(residual)
    if r < 5.0 * sigma:
        return ErrorClass.NORMAL
    if r <= 20.0 * sigma:
        return ErrorClass.GROSS
    return ErrorClass.EXTREME


def prefilter(ms: MeasurementSet, limits: Mapping[MeasurementType, tuple[float, float]]):
    """Drop entries outside their type's ``[min, max]`` window.

    Returns ``(kept, rejected_indices)``; survivors keep their relative order.
    """
    kept, rejected = [], []
    for i, (spec, z) in enumerate(zip(ms.specs, ms.z)):
        if spec.mtype not in limits:
            raise KeyError(f"no limits for measurement type {spec.mtype.value}")
        lo, hi = limits[spec.mtype]
        (kept if lo <= z <= hi else rejected).append(i)
    return ms.take(kept), rejected


@dataclass(frozen=True)
class Observability:
    observable: bool
    rank: int


def _reduced_flat_jacobian(stack: FormStack) -> np.ndarray:
    n_bus = stack.dim // 2
    jac = stack.jacobian(StateVector.flat(n_bus))
    if stack.ref_index is not None:
        jac = np.delete(jac, stack.ref_index, axis=1)
    return jac


def numerical_rank(mat: np.ndarray, rel: float = 1e-8) -> int:
    if mat.size == 0:
        return 0
    s = np.linalg.svd(mat, compute_uv=False)
    if s.size == 0 or s[0] == 0.0:
        return 0
    return int(np.sum(s > rel * s[0]))


def observability_check(net: Network, specs: Sequence[MeasurementSpec] | FormStack) -> Observability:
    """Rank of the flat-start Jacobian with the slack angle column removed."""
    stack = specs if isinstance(specs, FormStack) else FormStack.build(net, specs)
    if len(stack) == 0:
        raise ValueError("empty measurement plan")
    rank = numerical_rank(_reduced_flat_jacobian(stack))
    return Observability(rank == 2 * net.n_bus - 1, rank)


# --- CSV interfaces ---------------------------------------------------------

def write_plan(specs: Iterable[MeasurementSpec], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["mtype", "location", "sigma"])
        for s in specs:
            w.writerow([s.mtype.value, s.location, repr(float(s.sigma))])


def read_plan(path) -> list[MeasurementSpec]:
    with open(path, newline="", encoding="utf-8") as fh:
        return [MeasurementSpec(MeasurementType(r["mtype"]), int(r["location"]), float(r["sigma"]))
                for r in csv.DictReader(fh)]


MEASUREMENT_HEADER = ["t", "index", "mtype", "location", "z", "sigma"]


def write_measurement_sets(sets: Iterable[MeasurementSet], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(MEASUREMENT_HEADER)
        for ms in sets:
            for i, (s, z) in enumerate(zip(ms.specs, ms.z)):
                w.writerow([ms.t, i, s.mtype.value, s.location, repr(float(z)), repr(float(s.sigma))])


def read_measurement_sets(path) -> list[MeasurementSet]:
    groups: dict[int, list] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for r in csv.DictReader(fh):
            groups.setdefault(int(r["t"]), []).append(r)
    out = []
    for t, rows in groups.items():
        rows.sort(key=lambda r: int(r["index"]))
        specs = [MeasurementSpec(MeasurementType(r["mtype"]), int(r["location"]), float(r["sigma"]))
                 for r in rows]
        out.append(MeasurementSet(tuple(specs), [float(r["z"]) for r in rows], t))
    return out
