"""Network description, bus admittance matrix and exact complex-power quantities.

Conventions used throughout the package:

* per-unit quantities, angles in radians;
* bus ids are ``1..N``; line ids are ``1..L`` in file order;
* the forward end of a line is its ``from`` bus;
* for a complex power ``S = V * conj(I)`` computed at a bus or line end, the
  reported pair is ``(Re S, -Im S)``.  A shunt of susceptance ``b`` at ``|V| = 1``
  therefore reports ``Q = +b``.
"""
from __future__ import annotations

import csv
import enum
from dataclasses import dataclass, field
from functools import cached_property
from importlib import resources
from pathlib import Path

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components


class NetworkError(ValueError):
    pass


class BusKind(str, enum.Enum):
    SLACK = "slack"
    PV = "PV"
    PQ = "PQ"


class LineEnd(str, enum.Enum):
    FORWARD = "forward"
    TERMINAL = "terminal"


@dataclass(frozen=True)
class Bus:
    id: int
    kind: BusKind
    shunt_b: float = 0.0


@dataclass(frozen=True)
class Line:
    from_bus: int
    to_bus: int
    g: float
    b: float
    charging: float = 0.0

    def __post_init__(self):
        if self.from_bus == self.to_bus:
            raise NetworkError(f"line {self.from_bus}-{self.to_bus} is a self loop")
        if self.g == 0.0 and self.b == 0.0:
            raise NetworkError(f"line {self.from_bus}-{self.to_bus} has zero admittance")

    @property
    def admittance(self) -> complex:
        return complex(self.g, self.b)


@dataclass(frozen=True)
class Network:
    buses: tuple[Bus, ...]
    lines: tuple[Line, ...] = ()
    base_mva: float = 100.0

    def __post_init__(self):
        object.__setattr__(self, "buses", tuple(self.buses))
        object.__setattr__(self, "lines", tuple(self.lines))
        ids = [b.id for b in self.buses]
        if ids != list(range(1, len(ids) + 1)):
            raise NetworkError("bus ids must be the contiguous sequence 1..N in order")
        n_slack = sum(b.kind == BusKind.SLACK for b in self.buses)
        if n_slack != 1:
            raise NetworkError(f"expected exactly one slack bus, found {n_slack}")
        for k, ln in enumerate(self.lines, start=1):
            for end in (ln.from_bus, ln.to_bus):
                if not 1 <= end <= len(ids):
                    raise NetworkError(f"line {k} references unknown bus {end}")

    @property
    def n_bus(self) -> int:
        return len(self.buses)

    @property
    def n_line(self) -> int:
        return len(self.lines)

    @property
    def slack(self) -> int:
        """0-based index of the slack bus."""
        return next(i for i, b in enumerate(self.buses) if b.kind == BusKind.SLACK)

    def indices(self, kind: BusKind) -> np.ndarray:
        return np.array([i for i, b in enumerate(self.buses) if b.kind == kind], dtype=int)

    def line(self, line_id: int) -> Line:
        if not 1 <= line_id <= len(self.lines):
            raise NetworkError(f"unknown line id {line_id}")
        return self.lines[line_id - 1]

    def is_connected(self) -> bool:
        n = self.n_bus
        if not self.lines:
            return n == 1
        f = [ln.from_bus - 1 for ln in self.lines]
        t = [ln.to_bus - 1 for ln in self.lines]
        adj = coo_matrix((np.ones(len(f)), (f, t)), shape=(n, n))
        n_comp, _ = connected_components(adj, directed=False)
        return n_comp == 1

    @cached_property
    def ybus(self) -> np.ndarray:
        return build_ybus(self)


@dataclass(frozen=True, eq=False)
class StateVector:
    """Rectangular bus voltages ``V_n = vr[n] + j vi[n]``."""

    vr: np.ndarray
    vi: np.ndarray

    def __post_init__(self):
        vr = np.asarray(self.vr, dtype=float).reshape(-1)
        vi = np.asarray(self.vi, dtype=float).reshape(-1)
        if vr.shape != vi.shape:
            raise ValueError(f"vr and vi lengths differ: {vr.size} vs {vi.size}")
        if not (np.all(np.isfinite(vr)) and np.all(np.isfinite(vi))):
            raise ValueError("state vector has non-finite entries")
        object.__setattr__(self, "vr", vr)
        object.__setattr__(self, "vi", vi)

    def __eq__(self, other):
        if not isinstance(other, StateVector):
            return NotImplemented
        return np.array_equal(self.vr, other.vr) and np.array_equal(self.vi, other.vi)

    __hash__ = None

    @classmethod
    def flat(cls, n: int) -> "StateVector":
        return cls(np.ones(n), np.zeros(n))

    @classmethod
    def from_complex(cls, v) -> "StateVector":
        v = np.asarray(v, dtype=complex)
        return cls(v.real, v.imag)

    @classmethod
    def from_polar(cls, vm, va) -> "StateVector":
        return cls.from_complex(np.asarray(vm) * np.exp(1j * np.asarray(va)))

    @classmethod
    def from_interleaved(cls, x) -> "StateVector":
        x = np.asarray(x, dtype=float)
        return cls(x[0::2], x[1::2])

    @property
    def n_bus(self) -> int:
        return self.vr.size

    @property
    def complex(self) -> np.ndarray:
        return self.vr + 1j * self.vi

    @property
    def magnitude(self) -> np.ndarray:
        return np.hypot(self.vr, self.vi)

    @property
    def angle(self) -> np.ndarray:
        return np.arctan2(self.vi, self.vr)

    def interleaved(self) -> np.ndarray:
        """``[vr_1, vi_1, vr_2, vi_2, ...]``, the ordering used by quadratic forms."""
        x = np.empty(2 * self.n_bus)
        x[0::2] = self.vr
        x[1::2] = self.vi
        return x

    def blocks(self) -> np.ndarray:
        """``[vr_1..vr_N, vi_1..vi_N]``, the ordering used by dataset labels."""
        return np.concatenate([self.vr, self.vi])


def build_ybus(net: Network) -> np.ndarray:
    """Dense complex bus admittance matrix of a pi-model network."""
    if not net.is_connected():
        raise NetworkError("network not connected")
    n = net.n_bus
    y = np.zeros((n, n), dtype=complex)
    for bus in net.buses:
        y[bus.id - 1, bus.id - 1] += 1j * bus.shunt_b
    for ln in net.lines:
        f, t = ln.from_bus - 1, ln.to_bus - 1
        ys = ln.admittance
        half = 0.5j * ln.charging
        y[f, f] += ys + half
        y[t, t] += ys + half
        y[f, t] -= ys
        y[t, f] -= ys
    return y


def _pq(s):
    return s.real, -s.imag


def power_injections(net: Network, v: StateVector) -> tuple[np.ndarray, np.ndarray]:
    """(P, Q) at every bus."""
    vc = v.complex
    s = vc * np.conj(net.ybus @ vc)
    return _pq(s)


def power_injection(net: Network, v: StateVector, n: int) -> tuple[float, float]:
    if not 1 <= n <= net.n_bus:
        raise NetworkError(f"unknown bus id {n}")
    k = n - 1
    vc = v.complex
    s = vc[k] * np.conj(net.ybus[k] @ vc)
    p, q = _pq(s)
    return float(p), float(q)


def line_flow(net: Network, v: StateVector, line: Line | int,
              end: LineEnd | str = LineEnd.FORWARD) -> tuple[float, float]:
    """Complex power leaving ``end`` of ``line`` into the line's pi model."""
    ln = net.line(line) if isinstance(line, (int, np.integer)) else line
    end = LineEnd(end)
    vc = v.complex
    a, o = (ln.from_bus - 1, ln.to_bus - 1)
    if end is LineEnd.TERMINAL:
        a, o = o, a
    current = ln.admittance * (vc[a] - vc[o]) + 0.5j * ln.charging * vc[a]
    p, q = _pq(vc[a] * np.conj(current))
    return float(p), float(q)


def line_flows(net: Network, v: StateVector):
    """Vectorized flows: (pf, qf, pt, qt), one entry per line."""
    if not net.lines:
        e = np.zeros(0)
        return e, e, e, e
    vc = v.complex
    f = np.array([ln.from_bus - 1 for ln in net.lines])
    t = np.array([ln.to_bus - 1 for ln in net.lines])
    ys = np.array([ln.admittance for ln in net.lines])
    half = 0.5j * np.array([ln.charging for ln in net.lines])
    i_f = ys * (vc[f] - vc[t]) + half * vc[f]
    i_t = ys * (vc[t] - vc[f]) + half * vc[t]
    pf, qf = _pq(vc[f] * np.conj(i_f))
    pt, qt = _pq(vc[t] * np.conj(i_t))
    return pf, qf, pt, qt


# --- case files -------------------------------------------------------------

@dataclass(frozen=True)
class CaseData:
    """A network plus its nominal operating point (per bus, per-unit)."""

    net: Network
    p_demand: np.ndarray
    q_demand: np.ndarray
    p_gen: np.ndarray
    v_set: np.ndarray
    name: str = field(default="")


BUILTIN_CASES = {"2bus": "case2", "6bus": "case6", "14bus": "case14", "118bus": "case118"}


def _rows(path: Path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def read_network(directory) -> Network:
    directory = Path(directory)
    buses = [Bus(int(r["id"]), BusKind(r["kind"]), float(r["shunt_b"]))
             for r in _rows(directory / "buses.csv")]
    lines = [Line(int(r["from"]), int(r["to"]), float(r["g"]), float(r["b"]), float(r["charging"]))
             for r in _rows(directory / "lines.csv")]
    return Network(tuple(buses), tuple(lines))


def write_network(net: Network, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    with open(directory / "buses.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "kind", "shunt_b"])
        for b in net.buses:
            w.writerow([b.id, b.kind.value, repr(float(b.shunt_b))])
    with open(directory / "lines.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["from", "to", "g", "b", "charging"])
        for ln in net.lines:
            w.writerow([ln.from_bus, ln.to_bus, repr(float(ln.g)), repr(float(ln.b)),
                        repr(float(ln.charging))])


def load_case(name_or_path) -> CaseData:
    """Load a bundled case ('2bus', '6bus', '14bus', '118bus') or a case directory.

    A case directory holds ``buses.csv``, ``lines.csv`` and optionally ``loads.csv``
    (bus_id, p_demand, q_demand, p_gen, v_set); missing loads default to zero
    demand and 1.0 p.u. setpoints.
    """
    key = str(name_or_path)
    if key in BUILTIN_CASES:
        directory = Path(str(resources.files("gridse") / "cases" / BUILTIN_CASES[key]))
    else:
        directory = Path(key)
        if not directory.is_dir():
            raise NetworkError(f"unknown case {key!r}: not a bundled name or directory")
    net = read_network(directory)
    n = net.n_bus
    pd, qd, pg, vs = np.zeros(n), np.zeros(n), np.zeros(n), np.ones(n)
    loads = directory / "loads.csv"
    if loads.exists():
        for r in _rows(loads):
            k = int(r["bus_id"]) - 1
            pd[k], qd[k] = float(r["p_demand"]), float(r["q_demand"])
            pg[k], vs[k] = float(r["p_gen"]), float(r["v_set"])
    return CaseData(net, pd, qd, pg, vs, name=directory.name)
