"""One-step-ahead state forecasting with recurrent networks.

A forecaster reads the last ``r`` states (rows of width 2N) and predicts the
next one through an affine map of its final hidden state.  Inputs and targets
are min-max scaled per label block with statistics from the training rows.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from gridse.data import ScalingInfo, polar_to_rect, rect_to_polar
from gridse.grid import StateVector
from gridse.metrics import metric_nrmse
from gridse.nn import (LSTM, Dense, Dropout, OutputAffine, Sequential, SimpleRNN,
                       TimeDistributedDense)
from gridse.nn.train import History, TrainingError, fit

DEFAULT_WINDOW = 10

# Registry in report order, with the display names used in summary tables.
REGISTRY = {
    "lstm_fase": "LSTM Model",
    "tdist_fase": "Single Time distributed layer",
    "simple_rnn_fase": "Single SimpleRNN layer model",
    "stack_rnn_fase": "stack rnn fase",
    "pretrained_rnn_plnet_fase": "pretrained rnn plnet fase",
    "rnn_plnet_fase": "rnn plnet fase",
    "simplified_rpln_fase": "simplified rpln fase",
}
# Depths of the dense-interleaved stacks; these three structures are reconstructions.
PLNET_DEPTH = {"pretrained_rnn_plnet_fase": 2, "rnn_plnet_fase": 3, "simplified_rpln_fase": 2}
RECONSTRUCTED = frozenset(PLNET_DEPTH)
PERSISTENCE = "persistence"


@dataclass
class WindowedDataset:
    inputs: np.ndarray        # (n, r, 2N)
    targets: np.ndarray       # (n, 2N)
    target_index: np.ndarray  # position of each target in the source series
    r: int
    convention: str = "vr_vi"

    def __len__(self):
        return len(self.targets)

    def take(self, idx):
        idx = np.asarray(idx, dtype=int)
        return replace(self, inputs=self.inputs[idx], targets=self.targets[idx],
                       target_index=self.target_index[idx])


def _as_matrix(series, convention):
    if len(series) and isinstance(series[0], StateVector):
        rect = np.stack([s.blocks() for s in series])
        return rect if convention == "vr_vi" else rect_to_polar(rect)
    return np.atleast_2d(np.asarray(series, dtype=float))


def make_windows(series, r: int = DEFAULT_WINDOW, convention: str = "vr_vi") -> WindowedDataset:
    """Chronological windows: rows ``i .. i+r-1`` predict row ``i+r``.

    ``series`` is a list of StateVector (converted to ``convention`` blocks) or a
    ``(T, 2N)`` array used as is.
    """
    data = _as_matrix(series, convention)
    T = len(data)
    if r < 1:
        raise ValueError("window length must be >= 1")
    if T <= r:
        raise ValueError(f"series of length {T} is too short for windows of {r}")
    view = np.lib.stride_tricks.sliding_window_view(data, r, axis=0)  # (T-r+1, 2N, r)
    inputs = np.ascontiguousarray(view[:T - r].transpose(0, 2, 1))
    return WindowedDataset(inputs, data[r:].copy(), np.arange(r, T), r, convention)


def chronological_split(wd: WindowedDataset):
    n = len(wd)
    if n < 5:
        raise ValueError(f"need at least 5 windows to split, got {n}")
    n_train = int(np.floor(0.8 * n))
    return wd.take(np.arange(n_train)), wd.take(np.arange(n_train, n))


@dataclass(frozen=True)
class ForecastModelSpec:
    name: str
    hidden: int = 32
    depth: int | None = None
    dropout: float = 0.2
    epochs: int = 200
    batch_size: int = 32
    lr: float = 1e-3
    r: int = DEFAULT_WINDOW

    def __post_init__(self):
        if self.name not in REGISTRY:
            raise ValueError(f"unknown forecaster {self.name!r}; choose from {', '.join(REGISTRY)}")
        if self.hidden < 1 or self.r < 1 or self.epochs < 0:
            raise ValueError("hidden, r must be positive and epochs non-negative")

    @property
    def n_layers(self) -> int:
        if self.depth is not None:
            return self.depth
        if self.name == "stack_rnn_fase":
            return 2
        return PLNET_DEPTH.get(self.name, 1)

    @property
    def reconstructed(self) -> bool:
        return self.name in RECONSTRUCTED


def _layers(spec: ForecastModelSpec, width: int):
    h = spec.hidden
    name = spec.name
    if name == "lstm_fase":
        return [LSTM(h), OutputAffine(width)]
    if name == "tdist_fase":
        return [TimeDistributedDense(h), LSTM(h), Dropout(spec.dropout), OutputAffine(width)]
    if name in ("simple_rnn_fase", "stack_rnn_fase"):
        depth = 1 if name == "simple_rnn_fase" else spec.n_layers
        cells = [SimpleRNN(h, return_sequences=True) for _ in range(depth - 1)]
        return cells + [SimpleRNN(h), OutputAffine(width)]
    # dense-interleaved stacks: RNN -> per-step Dense -> RNN ...
    depth = spec.n_layers
    inter_act = None if name == "simplified_rpln_fase" else "tanh"
    layers = []
    for _ in range(depth - 1):
        layers += [SimpleRNN(h, return_sequences=True), TimeDistributedDense(h, inter_act)]
    return layers + [SimpleRNN(h), OutputAffine(width)]


@dataclass
class Forecaster:
    model: Sequential
    spec: ForecastModelSpec
    scaling: ScalingInfo | None = None
    convention: str = "vr_vi"
    meta: dict = field(default_factory=dict)

    @property
    def width(self) -> int:
        return self.model.output_shape[0]

    def _scale(self, v):
        return v if self.scaling is None else self.scaling.normalize_labels(v)

    def _unscale(self, v):
        return v if self.scaling is None else self.scaling.denormalize_labels(v)

    def predict(self, windows):
        windows = np.asarray(windows, dtype=float)
        if windows.ndim != 3 or windows.shape[1] != self.spec.r:
            raise ValueError(f"windows must be (B, {self.spec.r}, {self.width}), got {windows.shape}")
        return self._unscale(self.model.predict(self._scale(windows)))


def build_forecaster(spec: ForecastModelSpec, width: int, seed=None, convention="vr_vi") -> Forecaster:
    model = Sequential(_layers(spec, width), (spec.r, width), seed=seed)
    meta = {"reconstructed": spec.reconstructed, "layers": spec.n_layers}
    return Forecaster(model, spec, None, convention, meta)


def _fit_scaling(wd: WindowedDataset) -> ScalingInfo:
    rows = np.concatenate([wd.inputs.reshape(-1, wd.inputs.shape[-1]), wd.targets])
    return ScalingInfo.fit(np.zeros((len(rows), 1)), rows)


def train_forecaster(fc: Forecaster, wd: WindowedDataset, spec: ForecastModelSpec | None = None,
                     seed=None) -> tuple[Forecaster, History]:
    """Adam on MAE over the first 80% of windows; history scores the last 20%."""
    spec = spec or fc.spec
    if len(wd) == 0:
        raise ValueError("no windows to train on")
    train, valid = chronological_split(wd)
    fc.scaling = _fit_scaling(train)
    fc.convention = wd.convention
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(
        np.random.SeedSequence(seed).spawn(2)[1])
    if spec.epochs == 0:
        return fc, History()

    x = fc.scaling.normalize_labels(train.inputs)
    y = fc.scaling.normalize_labels(train.targets)
    if spec.name == "pretrained_rnn_plnet_fase":
        _pretrain_first_layer(fc, x, y, spec, rng)

    def on_epoch(epoch, loss):
        return metric_nrmse(fc.predict(valid.inputs), valid.targets).nrmse

    _, history, _ = fit(fc.model, x, y, spec.epochs, spec.batch_size, spec.lr, rng, "MAE",
                        on_epoch=on_epoch)
    return fc, history


def _pretrain_first_layer(fc, x, y, spec, rng):
    """Warm-start the first recurrent layer from a single-layer forecaster fit."""
    single = Sequential([SimpleRNN(spec.hidden), OutputAffine(fc.width)], (spec.r, fc.width), seed=rng)
    fit(single, x, y, max(1, spec.epochs // 4), spec.batch_size, spec.lr, rng, "MAE")
    fc.model.set_parameters({f"0.{k}": v.copy() for k, v in single.layers[0].params.items()})


def forecast_one_step(fc: Forecaster, window) -> StateVector:
    window = np.asarray(window, dtype=float)
    if window.shape != (fc.spec.r, fc.width):
        raise ValueError(f"window must be ({fc.spec.r}, {fc.width}), got {window.shape}")
    row = fc.predict(window[None])[0]
    a, b = np.split(row, 2)
    return StateVector(a, b) if fc.convention == "vr_vi" else StateVector.from_polar(a, b)


def persistence_baseline(window):
    """The last row of the window."""
    window = np.atleast_2d(np.asarray(window, dtype=float))
    if window.size == 0:
        raise ValueError("empty window")
    return window[..., -1, :].copy()


def _polar(rows, convention):
    return rect_to_polar(rows) if convention == "vr_vi" else np.asarray(rows, dtype=float)


@dataclass
class ForecastEvaluation:
    rows: list[dict]
    plots: dict            # name -> {"magnitude": (bus, truth, forecast), "angle": (...)}
    slot: int
    histories: dict


def evaluate_forecasters(names, wd: WindowedDataset, template: ForecastModelSpec | None = None,
                         seed=None, slot: int = 200) -> ForecastEvaluation:
    """Train each requested model and score it on the validation windows.

    Rows come in registry order followed by the persistence baseline.  A model
    that fails to train yields a row with ``status`` set to the error.  Plot
    data compares forecast and truth at target index ``slot`` (clamped to the
    series range).
    """
    template = template or ForecastModelSpec("simple_rnn_fase")
    wanted = [n for n in REGISTRY if n in set(names)]
    unknown = set(names) - set(REGISTRY) - {PERSISTENCE}
    if unknown:
        raise ValueError(f"unknown forecaster(s): {', '.join(sorted(unknown))}")
    _, valid = chronological_split(wd)
    slot = int(np.clip(slot, wd.target_index[0], wd.target_index[-1]))
    at = int(np.searchsorted(wd.target_index, slot))
    truth_polar = _polar(wd.targets[at], wd.convention)
    n_bus = wd.targets.shape[1] // 2
    bus = np.arange(1, n_bus + 1)

    rows, plots, histories = [], {}, {}

    def add_plot(name, pred_row):
        p = _polar(pred_row, wd.convention)
        plots[name] = {"magnitude": (bus, truth_polar[:n_bus], p[:n_bus]),
                       "angle": (bus, truth_polar[n_bus:], p[n_bus:])}

    for name in wanted:
        spec = replace(template, name=name, depth=template.depth if name == "stack_rnn_fase" else None)
        row = {"model": name, "display_name": REGISTRY[name], "reconstructed": spec.reconstructed}
        try:
            init = np.random.SeedSequence(seed).spawn(2)[0]
            fc = build_forecaster(spec, wd.targets.shape[1], np.random.default_rng(init), wd.convention)
            fc, hist = train_forecaster(fc, wd, spec, seed)
            rep = metric_nrmse(fc.predict(valid.inputs), valid.targets)
            row.update(nrmse=rep.nrmse, rmse_true=rep.rmse_true, status="ok")
            add_plot(name, fc.predict(wd.inputs[at:at + 1])[0])
            histories[name] = hist
        except (TrainingError, ValueError, FloatingPointError) as exc:
            row.update(nrmse=float("nan"), rmse_true=float("nan"), status=f"error: {exc}")
        rows.append(row)

    rep = metric_nrmse(persistence_baseline(valid.inputs), valid.targets)
    rows.append({"model": PERSISTENCE, "display_name": "persistence baseline", "reconstructed": False,
                 "nrmse": rep.nrmse, "rmse_true": rep.rmse_true, "status": "ok"})
    add_plot(PERSISTENCE, wd.inputs[at, -1])
    return ForecastEvaluation(rows, plots, slot, histories)


__all__ = [
    "DEFAULT_WINDOW", "PERSISTENCE", "REGISTRY", "ForecastEvaluation", "ForecastModelSpec",
    "Forecaster", "WindowedDataset", "build_forecaster", "chronological_split",
    "evaluate_forecasters", "forecast_one_step", "make_windows", "persistence_baseline",
    "polar_to_rect", "train_forecaster",
]
