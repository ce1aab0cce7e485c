"""Learned static estimator: a two-layer Conv1D regressor, plus a KNN baseline and sweeps."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from gridse.data import Dataset, ScalingInfo, normalize, split_80_20
from gridse.grid import StateVector
from gridse.metrics import metric_nrmse
from gridse.nn import Conv1D, Dense, Flatten, ReLU, Reshape, Sequential
from gridse.nn.train import History, TrainingError, fit

NEURON_GRID = tuple(range(185, 231, 5))
EPOCH_GRID = tuple(range(200, 701, 50))
EPOCH_SWEEP_NEURONS = (215, 230)
K_GRID = tuple(range(0, 10))


@dataclass(frozen=True)
class CnnEstimatorSpec:
    n_neurons: int
    input_len: int
    output_len: int
    kernel: int = 3
    epochs: int = 400
    batch_size: int = 32
    lr: float = 1e-3

    def __post_init__(self):
        if self.n_neurons < 1 or self.input_len < 1 or self.kernel < 1:
            raise ValueError("n_neurons, input_len and kernel must be positive")
        if self.output_len < 2 or self.output_len % 2:
            raise ValueError(f"output_len must be even, got {self.output_len}")
        if self.epochs < 0 or self.batch_size < 1 or self.lr <= 0:
            raise ValueError("invalid training settings")

    def with_(self, **kw) -> "CnnEstimatorSpec":
        return CnnEstimatorSpec(**{**self.__dict__, **kw})


def cnn_param_count(spec: CnnEstimatorSpec) -> int:
    f, k, m = spec.n_neurons, spec.kernel, spec.input_len
    return (f * k + f) + (f * k * f + f) + (m * f * spec.output_len + spec.output_len)


def build_cnn_estimator(spec: CnnEstimatorSpec, seed=None) -> Sequential:
    """``(B, M)`` normalized measurements to ``(B, 2N)`` normalized states."""
    layers = [
        Reshape((spec.input_len, 1)),
        Conv1D(spec.n_neurons, spec.kernel), ReLU(),
        Conv1D(spec.n_neurons, spec.kernel), ReLU(),
        Flatten(),
        Dense(spec.output_len),
    ]
    return Sequential(layers, (spec.input_len,), seed=seed)


@dataclass
class PreparedData:
    """Shuffled 80/20 split with train-only scaling; ``valid_truth`` is unscaled."""

    train_x: np.ndarray
    train_y: np.ndarray
    valid_x: np.ndarray
    valid_y: np.ndarray
    valid_truth: np.ndarray
    scaling: ScalingInfo
    convention: str
    train_idx: np.ndarray
    valid_idx: np.ndarray

    @property
    def input_len(self):
        return self.train_x.shape[1]

    @property
    def output_len(self):
        return self.train_y.shape[1]


def prepare(ds: Dataset, seed=None, mode: str = "shuffled") -> PreparedData:
    tr, va = split_80_20(len(ds), seed, mode)
    scaled, info = normalize(ds, tr)
    return PreparedData(scaled.inputs[tr], scaled.labels[tr], scaled.inputs[va], scaled.labels[va],
                        ds.labels[va], info, ds.convention, tr, va)


def _seeds(seed):
    init, train = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(init), np.random.default_rng(train)


def validation_nrmse(model: Sequential, data: PreparedData) -> float:
    pred = data.scaling.denormalize_labels(model.predict(data.valid_x))
    return metric_nrmse(pred, data.valid_truth).nrmse


def train_estimator(model: Sequential, data: PreparedData, spec: CnnEstimatorSpec, seed=None,
                    snapshots=None, rng=None):
    """Mini-batch Adam on MAE for ``spec.epochs`` epochs.

    History records train loss, validation NRMSE on unscaled states and the
    cumulative training time per epoch.  ``snapshots(epoch, model)`` is called
    after each epoch when given.
    """
    if rng is None:
        rng = _seeds(seed)[1]

    def on_epoch(epoch, train_loss):
        score = validation_nrmse(model, data) if len(data.valid_x) else None
        if snapshots:
            snapshots(epoch, model)
        return score

    if spec.epochs == 0:
        return model, History()
    model, history, _ = fit(model, data.train_x, data.train_y, spec.epochs, spec.batch_size,
                            spec.lr, rng, "MAE", on_epoch=on_epoch)
    return model, history


def run_estimator(data: PreparedData, spec: CnnEstimatorSpec, seed=None, snapshots=None):
    """Build and train with one seed governing init, shuffling and dropout."""
    init_rng, train_rng = _seeds(seed)
    model = build_cnn_estimator(spec, init_rng)
    return train_estimator(model, data, spec, snapshots=snapshots, rng=train_rng)


def labels_to_state(row, convention: str = "vr_vi") -> StateVector:
    a, b = np.split(np.asarray(row, dtype=float), 2)
    return StateVector(a, b) if convention == "vr_vi" else StateVector.from_polar(a, b)


def estimate(model: Sequential, z, scaling: ScalingInfo, convention: str = "vr_vi") -> StateVector:
    """State from one normalized measurement vector."""
    z = np.asarray(z, dtype=float).ravel()
    if z.size != model.input_shape[0]:
        raise ValueError(f"measurement vector has length {z.size}, model expects {model.input_shape[0]}")
    out = scaling.denormalize_labels(model.predict(z[None])[0])
    return labels_to_state(out, convention)


# --- KNN baseline -------------------------------------------------------------

def knn_predict(train_x, train_y, queries, k: int):
    """Unweighted mean label of the ``k`` nearest rows (Euclidean; ties to lower index)."""
    train_x = np.atleast_2d(np.asarray(train_x, dtype=float))
    train_y = np.atleast_2d(np.asarray(train_y, dtype=float))
    queries = np.atleast_2d(np.asarray(queries, dtype=float))
    n = len(train_x)
    if n == 0:
        raise ValueError("empty training set")
    if not 1 <= k <= n:
        raise ValueError(f"k must be in [1, {n}], got {k}")
    d2 = (np.sum(queries ** 2, axis=1)[:, None] - 2.0 * queries @ train_x.T
          + np.sum(train_x ** 2, axis=1)[None, :])
    nearest = np.argsort(d2, axis=1, kind="stable")[:, :k]
    return train_y[nearest].mean(axis=1)


def knn_estimate(train_x, train_y, z, k: int, scaling: ScalingInfo | None = None,
                 convention: str = "vr_vi") -> StateVector:
    out = knn_predict(train_x, train_y, z, k)[0]
    if scaling is not None:
        out = scaling.denormalize_labels(out)
    return labels_to_state(out, convention)


# --- sweeps ---------------------------------------------------------------------

def neuron_grid(output_len: int | None = None) -> list[int]:
    """Hidden width grid, always including the label width."""
    grid = list(NEURON_GRID)
    extra = 236 if output_len is None else output_len
    if extra not in grid:
        grid.append(extra)
    return sorted(grid)


def argmin_row(rows, key="nrmse"):
    valid = [r for r in rows if r.get("status", "ok") == "ok" and np.isfinite(r[key])]
    return min(valid, key=lambda r: r[key]) if valid else None


def sweep_neurons(values, data: PreparedData, base: CnnEstimatorSpec, seed=None):
    """Rows ``{n_neurons, nrmse, rmse_true}`` sorted by width."""
    rows = []
    for f in sorted(values):
        spec = base.with_(n_neurons=int(f))
        model, _ = run_estimator(data, spec, seed)
        pred = data.scaling.denormalize_labels(model.predict(data.valid_x))
        rep = metric_nrmse(pred, data.valid_truth)
        rows.append({"n_neurons": int(f), "nrmse": rep.nrmse, "rmse_true": rep.rmse_true})
    return rows


def sweep_epochs(values, neurons, data: PreparedData, base: CnnEstimatorSpec, seed=None):
    """Rows ``{epochs, n_neurons, nrmse, train_time}``.

    Each width is trained once up to ``max(values)`` and scored at every listed
    epoch.  Training consumes its generator identically whatever the horizon, so
    the epoch-``e`` snapshot equals a fresh ``e``-epoch run with the same seed.
    """
    values = sorted(int(v) for v in values)
    rows = []
    for f in neurons:
        spec = base.with_(n_neurons=int(f), epochs=max(values))
        wanted = set(values)
        scored = {}

        def snap(epoch, model):
            if epoch in wanted:
                scored[epoch] = validation_nrmse(model, data)

        init_rng, train_rng = _seeds(seed)
        model = build_cnn_estimator(spec, init_rng)
        if 0 in wanted:
            scored[0] = validation_nrmse(model, data)
        _, hist = train_estimator(model, data, spec, snapshots=snap, rng=train_rng)
        times = {r.epoch: r.train_time for r in hist.records}
        times[0] = 0.0
        for e in values:
            rows.append({"epochs": e, "n_neurons": int(f), "nrmse": scored[e], "train_time": times[e]})
    rows.sort(key=lambda r: (r["epochs"], r["n_neurons"]))
    return rows


def sweep_k(values, data: PreparedData):
    """Rows ``{k, nrmse, status}``; out-of-range k gives a flagged row with NaN."""
    n = len(data.train_x)
    rows = []
    for k in values:
        k = int(k)
        if not 1 <= k <= n:
            rows.append({"k": k, "nrmse": float("nan"), "status": f"invalid: k must be in [1, {n}]"})
            continue
        pred = data.scaling.denormalize_labels(knn_predict(data.train_x, data.train_y, data.valid_x, k))
        rows.append({"k": k, "nrmse": metric_nrmse(pred, data.valid_truth).nrmse, "status": "ok"})
    return rows


__all__ = [
    "CnnEstimatorSpec", "PreparedData", "TrainingError", "argmin_row", "build_cnn_estimator",
    "cnn_param_count", "estimate", "knn_estimate", "knn_predict", "neuron_grid", "prepare",
    "run_estimator", "sweep_epochs", "sweep_k", "sweep_neurons", "train_estimator",
    "validation_nrmse",
]
