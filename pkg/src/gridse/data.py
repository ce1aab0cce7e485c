"""Dataset files, splits and scaling for the learned estimator and forecasters.

A dataset is a pair of row-aligned matrices: ``inputs`` (one measurement vector
per row, width M) and ``labels`` (one state per row, width 2N).  Labels are two
equal blocks, either ``[vr | vi]`` (convention ``vr_vi``) or ``[|V| | theta]``
(convention ``vm_va``).

Scaling: inputs are standardized per feature; each label block is min-max
scaled to [0, 1] with one scalar minimum and range per block.  All statistics
come from the training rows only.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

CONVENTIONS = ("vr_vi", "vm_va")
TAG_PREFIX = "# convention="


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class DatasetSchema:
    n_features: int
    n_labels: int
    n_train: int
    n_test: int


@dataclass
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    convention: str = "vr_vi"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.inputs = np.atleast_2d(np.asarray(self.inputs, dtype=float))
        self.labels = np.atleast_2d(np.asarray(self.labels, dtype=float))
        if len(self.inputs) != len(self.labels):
            raise DatasetError(f"{len(self.inputs)} input rows but {len(self.labels)} label rows")
        if self.labels.shape[1] % 2:
            raise DatasetError(f"label width must be even, got {self.labels.shape[1]}")
        if self.convention not in CONVENTIONS:
            raise DatasetError(f"unknown label convention {self.convention!r}")

    def __len__(self):
        return len(self.inputs)

    @property
    def n_bus(self) -> int:
        return self.labels.shape[1] // 2

    def schema(self, train_fraction: float = 0.8) -> DatasetSchema:
        n_train = int(np.floor(train_fraction * len(self)))
        return DatasetSchema(self.inputs.shape[1], self.labels.shape[1], n_train, len(self) - n_train)

    def take(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=int)
        return replace(self, inputs=self.inputs[idx], labels=self.labels[idx], meta=dict(self.meta))

    def to_convention(self, convention: str) -> "Dataset":
        if convention == self.convention:
            return self
        conv = rect_to_polar if convention == "vm_va" else polar_to_rect
        return replace(self, labels=conv(self.labels), convention=convention, meta=dict(self.meta))

    @classmethod
    def from_timeseries(cls, ts) -> "Dataset":
        """Measurements and rectangular states of a simulated time series."""
        meta = {k: v for k, v in ts.meta.items()}
        meta["seed"] = ts.seed
        return cls(ts.inputs(), ts.labels(), "vr_vi", meta)


# --- label conventions ------------------------------------------------------

def rect_to_polar(labels):
    labels = np.asarray(labels, dtype=float)
    vr, vi = np.split(labels, 2, axis=-1)
    return np.concatenate([np.hypot(vr, vi), np.arctan2(vi, vr)], axis=-1)


def polar_to_rect(labels):
    labels = np.asarray(labels, dtype=float)
    vm, va = np.split(labels, 2, axis=-1)
    return np.concatenate([vm * np.cos(va), vm * np.sin(va)], axis=-1)


# --- CSV files --------------------------------------------------------------

def _read_matrix(path, what):
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"{what} file not found: {path}")
    convention = None
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        lines = iter(csv.reader(fh))
        header = None
        line_no = 0
        for row in lines:
            line_no += 1
            if row and row[0].startswith("#"):
                text = ",".join(row)
                if text.startswith(TAG_PREFIX):
                    convention = text[len(TAG_PREFIX):].strip()
                continue
            if header is None:
                header = row
                continue
            if not row:
                continue
            if len(row) != len(header):
                raise DatasetError(f"{path}: line {line_no} has {len(row)} cells, header has {len(header)}")
            vals = []
            for col, cell in enumerate(row):
                try:
                    vals.append(float(cell))
                except ValueError:
                    raise DatasetError(
                        f"{path}: non-numeric cell {cell!r} at line {line_no}, column {col + 1}") from None
            rows.append(vals)
    if header is None:
        raise DatasetError(f"{path}: missing header row")
    data = np.array(rows, dtype=float).reshape(len(rows), len(header))
    return data, convention


def load_csv_dataset(inputs_path, labels_path, convention: str | None = None,
                     n_features: int | None = None, n_labels: int | None = None) -> Dataset:
    """Read an inputs/labels CSV pair (header row, optional ``# convention=`` tag line).

    ``n_features``/``n_labels`` optionally pin the expected widths.  The label
    convention comes from the argument, else the labels file tag, else ``vr_vi``.
    """
    x, _ = _read_matrix(inputs_path, "inputs")
    y, tag = _read_matrix(labels_path, "labels")
    if len(x) != len(y):
        raise DatasetError(f"row count mismatch: {len(x)} input rows vs {len(y)} label rows")
    if n_features is not None and x.shape[1] != n_features:
        raise DatasetError(f"inputs have {x.shape[1]} columns, expected {n_features}")
    if n_labels is not None and y.shape[1] != n_labels:
        raise DatasetError(f"labels have {y.shape[1]} columns, expected {n_labels}")
    meta = read_meta(Path(inputs_path).with_suffix(".meta"))
    return Dataset(x, y, convention or tag or meta.get("convention", "vr_vi"), meta)


def _write_matrix(path, data, prefix, tag=None):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        if tag:
            fh.write(f"{TAG_PREFIX}{tag}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"{prefix}{j}" for j in range(data.shape[1])])
        for row in data:
            w.writerow([repr(float(v)) for v in row])


def write_csv_dataset(ds: Dataset, inputs_path, labels_path, extra_meta: dict | None = None) -> None:
    """Write both matrices plus an ``inputs``-named ``.meta`` sidecar (key=value lines)."""
    _write_matrix(inputs_path, ds.inputs, "z", ds.convention)
    names = ("vr", "vi") if ds.convention == "vr_vi" else ("vm", "va")
    with open(labels_path, "w", newline="", encoding="utf-8") as fh:
        fh.write(f"{TAG_PREFIX}{ds.convention}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"{b}{k + 1}" for b in names for k in range(ds.n_bus)])
        for row in ds.labels:
            w.writerow([repr(float(v)) for v in row])
    meta = {**ds.meta, **(extra_meta or {})}
    meta.update({"convention": ds.convention, "n_samples": len(ds),
                 "n_features": ds.inputs.shape[1], "n_labels": ds.labels.shape[1],
                 "input_scaling": "standardize per feature (train rows)",
                 "label_scaling": "min-max per label block to [0, 1] (train rows)"})
    write_meta(Path(inputs_path).with_suffix(".meta"), meta)


def write_meta(path, meta: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for k in sorted(meta):
            fh.write(f"{k}={meta[k]}\n")


def read_meta(path) -> dict:
    path = Path(path)
    if not path.exists():
        return {}
    out = {}
    for line in path.read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, value = line.partition("=")
        out[key.strip()] = value.strip()
    return out


# --- splits -----------------------------------------------------------------

def split_80_20(n: int, seed=None, mode: str = "shuffled"):
    """Index arrays ``(train, valid)`` with ``floor(0.8 n)`` training rows."""
    if n < 5:
        raise DatasetError(f"need at least 5 samples to split, got {n}")
    n_train = int(np.floor(0.8 * n))
    if mode == "chronological":
        order = np.arange(n)
    elif mode == "shuffled":
        order = np.random.default_rng(seed).permutation(n)
    else:
        raise ValueError(f"unknown split mode {mode!r}")
    return order[:n_train], order[n_train:]


# --- scaling ----------------------------------------------------------------

@dataclass(frozen=True)
class ScalingInfo:
    """Affine maps ``normalized = (raw - offset) / scale``.

    ``in_offset``/``in_scale`` are per input feature; ``label_offset``/``label_scale``
    hold one scalar per label block (first half, second half).
    """

    in_offset: np.ndarray
    in_scale: np.ndarray
    label_offset: np.ndarray
    label_scale: np.ndarray

    @classmethod
    def fit(cls, inputs, labels) -> "ScalingInfo":
        inputs = np.atleast_2d(np.asarray(inputs, dtype=float))
        labels = np.atleast_2d(np.asarray(labels, dtype=float))
        mean = inputs.mean(axis=0)
        std = inputs.std(axis=0)
        # a constant feature keeps scale 1 and offset = its value
        std = np.where(std > 0, std, 1.0)
        offs, scales = [], []
        for block in np.split(labels, 2, axis=1):
            lo, hi = float(block.min()), float(block.max())
            offs.append(lo)
            scales.append(hi - lo if hi > lo else 1.0)
        return cls(mean, std, np.array(offs), np.array(scales))

    def _label_vectors(self, width):
        half = width // 2
        return np.repeat(self.label_offset, half), np.repeat(self.label_scale, half)

    def normalize_inputs(self, z):
        return (np.asarray(z, dtype=float) - self.in_offset) / self.in_scale

    def denormalize_inputs(self, z):
        return np.asarray(z, dtype=float) * self.in_scale + self.in_offset

    def normalize_labels(self, v):
        v = np.asarray(v, dtype=float)
        off, sc = self._label_vectors(v.shape[-1])
        return (v - off) / sc

    def denormalize_labels(self, v):
        v = np.asarray(v, dtype=float)
        off, sc = self._label_vectors(v.shape[-1])
        return v * sc + off

    def as_meta(self) -> dict:
        return {"in_offset": self.in_offset.tolist(), "in_scale": self.in_scale.tolist(),
                "label_offset": self.label_offset.tolist(), "label_scale": self.label_scale.tolist()}

    @classmethod
    def from_meta(cls, meta: dict) -> "ScalingInfo":
        return cls(*(np.asarray(meta[k], dtype=float)
                     for k in ("in_offset", "in_scale", "label_offset", "label_scale")))


def normalize(ds: Dataset, train_idx=None) -> tuple[Dataset, ScalingInfo]:
    """Scale a dataset with statistics from ``train_idx`` rows (all rows if None)."""
    rows = slice(None) if train_idx is None else np.asarray(train_idx, dtype=int)
    info = ScalingInfo.fit(ds.inputs[rows], ds.labels[rows])
    out = replace(ds, inputs=info.normalize_inputs(ds.inputs),
                  labels=info.normalize_labels(ds.labels), meta=dict(ds.meta))
    return out, info


def denormalize(values, info: ScalingInfo):
    """Inverse label scaling (the quantity every reported metric is computed on)."""
    return info.denormalize_labels(values)


def reshape_for_conv(batch):
    """``(B, M)`` feature rows to the ``(B, M, 1)`` layout of a 1-channel Conv1D."""
    batch = np.asarray(batch, dtype=float)
    if batch.ndim == 1:
        batch = batch[None]
    return batch.reshape(batch.shape[0], batch.shape[1], 1)
