"""Compact CNN assembly, inference, and binary serialization."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from ..errors import ConfigError, NumericError, ShapeError, StructureError
from .layers import LAYER_TYPES, Conv2D, Dense, Dropout, Flatten, Layer, MaxPool2D, ReLU

MODEL_FORMAT_VERSION = 1

# Table I general ranges, enforced only for tuner-driven configs.
TUNER_RANGES = {
    "max_epochs": (5, 50),
    "batch_size": (32, 128),
    "early_stop_patience": (2, 5),
    "learning_rate": (0.001, 0.1),
    "dropout_rate": (0.2, 0.8),
}


@dataclass(frozen=True)
class CnnConfig:
    """Architecture plus training hyper-parameters for one compact CNN.

    ``conv_blocks`` lists the filter count of each conv(3x3)+pool(2x2)
    block. ``dense_width`` of 0 drops the hidden dense layer (degenerate
    linear-softmax model, used for verification).
    """

    conv_blocks: tuple[int, ...] = (16,)
    dense_width: int = 64
    dropout_rate: float = 0.5
    learning_rate: float = 0.003
    batch_size: int = 128
    max_epochs: int = 20
    early_stop_patience: int = 3
    frozen_layers: int = 0
    rng_seed: int = 0

    def validate(self, tuner_ranges: bool = False) -> None:
        if any(f < 1 for f in self.conv_blocks):
            raise ConfigError("conv block filter counts must be positive")
        if self.dense_width < 0:
            raise ConfigError("dense_width must be >= 0")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate {self.dropout_rate} outside [0, 1)")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.batch_size < 1 or self.max_epochs < 1 or self.early_stop_patience < 1:
            raise ConfigError("batch size, epochs, and patience must be >= 1")
        if self.frozen_layers < 0:
            raise ConfigError("frozen_layers must be >= 0")
        if tuner_ranges:
            for name, (lo, hi) in TUNER_RANGES.items():
                v = getattr(self, name)
                if not lo <= v <= hi:
                    raise ConfigError(f"{name}={v} outside tuner range [{lo}, {hi}]")


@dataclass
class CnnModel:
    """Layered classifier with per-layer freeze flags and a softmax head."""

    layers: list[Layer]
    num_classes: int
    input_shape: tuple[int, int, int]
    config: CnnConfig
    feature_index: int | None = None  # index of the tap after the top dense layer
    dtype: np.dtype = field(default_factory=lambda: np.dtype(np.float32))

    @property
    def weighted_layers(self) -> list[Layer]:
        return [l for l in self.layers if l.params]

    @property
    def n_parameters(self) -> int:
        return sum(l.n_params for l in self.layers)

    @property
    def dense_width(self) -> int:
        return self.config.dense_width

    def set_frozen_layers(self, count: int, skip_head: bool = False) -> None:
        """Freeze the bottom ``count`` weighted layers (input side first).

        With ``skip_head`` the softmax head stays trainable regardless of
        the count (used when fine-tuning swaps in a fresh head).
        """
        weighted = self.weighted_layers
        if not 0 <= count <= len(weighted):
            raise ConfigError(f"frozen_layers {count} outside [0, {len(weighted)}]")
        for i, layer in enumerate(weighted):
            layer.frozen = i < count
        if skip_head:
            weighted[-1].frozen = False

    def forward_logits(self, x: np.ndarray, training: bool = False, rng=None) -> np.ndarray:
        for layer in self.layers:
            x = layer.forward(x, training=training, rng=rng)
        return x

    def forward_with_features(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray | None]:
        feats = None
        for i, layer in enumerate(self.layers):
            x = layer.forward(x, training=False)
            if i == self.feature_index:
                feats = x
        return x, feats

    def backward(self, dlogits: np.ndarray) -> None:
        grad = dlogits
        for layer in reversed(self.layers):
            grad = layer.backward(grad)

    def get_weights(self) -> list[dict[str, np.ndarray]]:
        return [{k: v.copy() for k, v in l.params.items()} for l in self.weighted_layers]

    def set_weights(self, weights: list[dict[str, np.ndarray]]) -> None:
        for layer, snap in zip(self.weighted_layers, weights, strict=True):
            for k in layer.params:
                layer.params[k] = snap[k].copy()

    def astype(self, dtype) -> "CnnModel":
        """Clone with parameters converted to ``dtype`` (for verification)."""
        clone = decode_model(encode_model(self))
        clone.dtype = np.dtype(dtype)
        for layer in clone.layers:
            layer.params = {k: v.astype(dtype) for k, v in layer.params.items()}
        return clone

    def clone(self) -> "CnnModel":
        return decode_model(encode_model(self))


def build_cnn(
    config: CnnConfig, input_shape: tuple[int, int, int], num_classes: int
) -> CnnModel:
    """Assemble a compact CNN with deterministic seeded initialization."""
    config.validate()
    if num_classes < 1:
        raise ConfigError("num_classes must be >= 1")
    h, w, c = input_shape
    if c != 3:
        raise ConfigError(f"expected three input channels, got {c}")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([config.rng_seed, 0])))

    layers: list[Layer] = []
    ch = c
    for filters in config.conv_blocks:
        if min(h, w) < 4:
            raise ConfigError(
                f"input collapsed to {h}x{w}; every pooling stage needs H,W >= 4"
            )
        layers.append(Conv2D(ch, filters, rng))
        layers.append(ReLU())
        layers.append(MaxPool2D())
        ch = filters
        h, w = h // 2, w // 2
    layers.append(Flatten())
    flat = h * w * ch
    feature_index = None
    if config.dense_width > 0:
        layers.append(Dense(flat, config.dense_width, rng))
        layers.append(ReLU())
        feature_index = len(layers) - 1
        if config.dropout_rate > 0:
            layers.append(Dropout(config.dropout_rate))
        flat = config.dense_width
    layers.append(Dense(flat, num_classes, rng))

    model = CnnModel(
        layers=layers,
        num_classes=num_classes,
        input_shape=tuple(input_shape),
        config=config,
        feature_index=feature_index,
    )
    if config.frozen_layers:
        model.set_frozen_layers(config.frozen_layers)
    return model


def softmax(logits: np.ndarray) -> np.ndarray:
    """Softmax(z)_i = e^{z_i} / sum_j e^{z_j}, max-subtracted for stability."""
    z = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise NumericError("softmax input contains non-finite values")
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def images_to_tensor(images: np.ndarray, dtype=np.float32) -> np.ndarray:
    """Scale uint8 pixel tensors to [0, 1] floats; pass floats through."""
    arr = np.asarray(images)
    dt = np.dtype(dtype)
    if arr.dtype == np.uint8:
        return arr.astype(dt) / np.asarray(255.0, dtype=dt)
    return arr.astype(dt, copy=False)


def _as_batch(model: CnnModel, image: np.ndarray) -> tuple[np.ndarray, bool]:
    arr = images_to_tensor(image, model.dtype)
    if arr.shape == model.input_shape:
        return arr[None, ...], True
    if arr.ndim == 4 and arr.shape[1:] == model.input_shape:
        return arr, False
    raise ShapeError(
        f"image shape {arr.shape} does not match model input {model.input_shape}"
    )


def predict_proba(model: CnnModel, image: np.ndarray) -> np.ndarray:
    """Posterior probability vector(s) with dropout disabled."""
    batch, single = _as_batch(model, image)
    probs = softmax(model.forward_logits(batch, training=False))
    return probs[0] if single else probs


def predict_label(model: CnnModel, image: np.ndarray) -> np.ndarray | int:
    probs = predict_proba(model, image)
    return int(np.argmax(probs)) if probs.ndim == 1 else np.argmax(probs, axis=-1)


def extract_dense_features(model: CnnModel, image: np.ndarray) -> np.ndarray:
    """Post-activation output of the top dense layer, taken before dropout."""
    if model.feature_index is None:
        raise StructureError("model has no dense layer before the head")
    batch, single = _as_batch(model, image)
    _, feats = model.forward_with_features(batch)
    return feats[0] if single else feats


# ---------------------------------------------------------------------------
# Serialization: JSON header + raw little-endian tensors, bit-exact.
# ---------------------------------------------------------------------------

def encode_model(model: CnnModel) -> bytes:
    tensors: list[np.ndarray] = []
    tensor_meta = []
    arch = []
    for i, layer in enumerate(model.layers):
        arch.append(layer.descriptor())
        for name in sorted(layer.params):
            arr = layer.params[name]
            le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
            tensors.append(np.ascontiguousarray(le))
            tensor_meta.append(
                {"layer": i, "name": name, "shape": list(arr.shape),
                 "dtype": le.dtype.str}
            )
    header = {
        "format": MODEL_FORMAT_VERSION,
        "kind": "cnn-model",
        "num_classes": model.num_classes,
        "input_shape": list(model.input_shape),
        "feature_index": model.feature_index,
        "dtype": np.dtype(model.dtype).str,
        "config": _config_to_dict(model.config),
        "arch": arch,
        "tensors": tensor_meta,
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    blob = b"".join(t.tobytes() for t in tensors)
    return struct.pack("<I", len(head)) + head + blob


def decode_model(data: bytes) -> CnnModel:
    (head_len,) = struct.unpack_from("<I", data, 0)
    header = json.loads(data[4 : 4 + head_len].decode("utf-8"))
    if header.get("format") != MODEL_FORMAT_VERSION:
        raise ConfigError(f"unsupported model format {header.get('format')!r}")
    config = _config_from_dict(header["config"])
    model = build_cnn(
        config, tuple(header["input_shape"]), int(header["num_classes"])
    )
    offset = 4 + head_len
    for meta in header["tensors"]:
        dt = np.dtype(meta["dtype"])
        count = int(np.prod(meta["shape"])) if meta["shape"] else 1
        arr = np.frombuffer(data, dtype=dt, count=count, offset=offset).reshape(meta["shape"])
        offset += arr.nbytes
        model.layers[meta["layer"]].params[meta["name"]] = arr.copy()
    for i, desc in enumerate(header["arch"]):
        model.layers[i].frozen = bool(desc.get("frozen", False))
    model.dtype = np.dtype(header["dtype"])
    model.feature_index = header["feature_index"]
    return model


def _config_to_dict(config: CnnConfig) -> dict:
    return {
        "conv_blocks": list(config.conv_blocks),
        "dense_width": config.dense_width,
        "dropout_rate": config.dropout_rate,
        "learning_rate": config.learning_rate,
        "batch_size": config.batch_size,
        "max_epochs": config.max_epochs,
        "early_stop_patience": config.early_stop_patience,
        "frozen_layers": config.frozen_layers,
        "rng_seed": config.rng_seed,
    }


def _config_from_dict(raw: dict) -> CnnConfig:
    return CnnConfig(
        conv_blocks=tuple(raw["conv_blocks"]),
        dense_width=int(raw["dense_width"]),
        dropout_rate=float(raw["dropout_rate"]),
        learning_rate=float(raw["learning_rate"]),
        batch_size=int(raw["batch_size"]),
        max_epochs=int(raw["max_epochs"]),
        early_stop_patience=int(raw["early_stop_patience"]),
        frozen_layers=int(raw["frozen_layers"]),
        rng_seed=int(raw["rng_seed"]),
    )


def with_config(config: CnnConfig, **overrides) -> CnnConfig:
    return replace(config, **overrides)
