"""Sequential container, reverse-mode pass and checkpoints."""
from __future__ import annotations

import io
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from gridse.nn.layers import LAYER_TYPES, Layer

CHECKPOINT_FORMAT = "gridse-checkpoint"
CHECKPOINT_VERSION = 1


class StaleCacheError(RuntimeError):
    pass


@dataclass
class Cache:
    token: int
    layer_caches: list


class Sequential:
    """A chain of layers built for a fixed per-sample ``input_shape``.

    Parameter keys are ``"<layer index>.<name>"``.
    """

    def __init__(self, layers: list[Layer], input_shape, seed=None):
        self.layers = list(layers)
        self.input_shape = tuple(int(s) for s in input_shape)
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        shape = self.input_shape
        for layer in self.layers:
            shape = layer.build(shape, rng)
        self.output_shape = tuple(shape)
        self._token = 0

    # -- parameters --
    def parameters(self) -> dict[str, np.ndarray]:
        return {f"{i}.{k}": v for i, layer in enumerate(self.layers) for k, v in layer.params.items()}

    def buffers(self) -> dict[str, np.ndarray]:
        return {f"{i}.{k}": v for i, layer in enumerate(self.layers) for k, v in layer.buffers.items()}

    def n_params(self) -> int:
        return sum(layer.n_params() for layer in self.layers)

    def set_parameters(self, values: dict[str, np.ndarray]) -> None:
        for key, val in values.items():
            i, name = key.split(".", 1)
            layer = self.layers[int(i)]
            if name in layer.params:
                if layer.params[name].shape != val.shape:
                    raise ValueError(f"{key}: shape {val.shape} != {layer.params[name].shape}")
                layer.params[name] = np.array(val, dtype=float)
            else:
                layer.buffers[name] = np.array(val, dtype=float)
        self._token += 1

    # -- passes --
    def forward(self, x, mode: str = "infer", seed=None):
        """Run all layers; ``mode`` is 'train' or 'infer'.  Returns ``(y, cache)``."""
        if mode not in ("train", "infer"):
            raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
        x = np.asarray(x, dtype=float)
        if x.shape[1:] != self.input_shape:
            raise ValueError(f"layer 0: expected input shape (B, {self.input_shape}), got {x.shape}")
        train = mode == "train"
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        caches = []
        for i, layer in enumerate(self.layers):
            try:
                x, c = layer.forward(x, train=train, rng=rng)
            except ValueError as exc:
                raise ValueError(f"layer {i} ({type(layer).__name__}): {exc}") from exc
            caches.append(c)
        self._token += 1
        return x, Cache(self._token, caches)

    def predict(self, x, batch_size: int = 1024):
        x = np.asarray(x, dtype=float)
        out = [self.forward(x[i:i + batch_size])[0] for i in range(0, len(x), batch_size)]
        return np.concatenate(out) if out else np.zeros((0, *self.output_shape))

    def backward(self, cache: Cache, dy):
        """Gradients of every parameter given ``dLoss/dy``; returns ``(grads, dx)``."""
        if cache.token != self._token:
            raise StaleCacheError("cache does not belong to the latest forward pass")
        grads = {}
        for i in range(len(self.layers) - 1, -1, -1):
            dy, g = self.layers[i].backward(cache.layer_caches[i], dy)
            for k, v in g.items():
                grads[f"{i}.{k}"] = v
        return grads, dy

    def spec(self) -> list[dict]:
        return [{"type": type(l).__name__, **l.config()} for l in self.layers]

    def __repr__(self):
        inner = ", ".join(repr(l) for l in self.layers)
        return f"Sequential([{inner}], input_shape={self.input_shape})"


def forward(model: Sequential, x, mode="infer", seed=None):
    return model.forward(x, mode, seed)


def backward(model: Sequential, cache: Cache, dy):
    return model.backward(cache, dy)[0]


def layer_from_spec(spec: dict) -> Layer:
    spec = dict(spec)
    cls = LAYER_TYPES[spec.pop("type")]
    return cls(**spec)


def save_checkpoint(model: Sequential, path, meta: dict | None = None) -> None:
    """Write an ``.npz`` holding a JSON header (``__meta__``) plus every buffer.

    Header keys: format, version, input_shape, layers (type + constructor args),
    meta (caller data, e.g. scaling).  Arrays are stored as ``param:<key>`` and
    ``buffer:<key>`` in float64, so reloading reproduces inference exactly.
    """
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "input_shape": list(model.input_shape),
        "layers": model.spec(),
        "meta": meta or {},
    }
    arrays = {f"param:{k}": v for k, v in model.parameters().items()}
    arrays.update({f"buffer:{k}": v for k, v in model.buffers().items()})
    arrays["__meta__"] = np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path) -> tuple[Sequential, dict]:
    with np.load(path) as data:
        header = json.loads(bytes(data["__meta__"]).decode())
        if header.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} file")
        if header.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {header.get('version')}")
        model = Sequential([layer_from_spec(s) for s in header["layers"]], header["input_shape"], seed=0)
        values = {}
        for key in data.files:
            if key.startswith("param:") or key.startswith("buffer:"):
                values[key.split(":", 1)[1]] = data[key]
    model.set_parameters(values)
    return model, header["meta"]
