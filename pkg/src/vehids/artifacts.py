"""Versioned, hash-verified binary container for every persisted object.

Layout: magic, u16 container version, u8 kind, u64 payload length,
32-byte SHA-256 of the payload, payload bytes. The payload hash doubles
as the artifact's content identity (ensembles reference their base
models by it).
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .cnn.layers import Dense, Dropout, Flatten
from .cnn.model import (
    CnnConfig,
    CnnModel,
    _config_from_dict,
    _config_to_dict,
    decode_model,
    encode_model,
)
from .ensemble import AVERAGING, CONCATENATION, EnsembleModel
from .errors import ArtifactVersionError, ConfigError, CorruptArtifactError
from .transform import QuantileMap

MAGIC = b"VEHIDS\x00"
CONTAINER_VERSION = 1

KIND_MODEL = 1
KIND_QUANTILE_MAP = 2
KIND_ENSEMBLE = 3
KIND_MANIFEST = 4

_KIND_NAMES = {
    KIND_MODEL: "model",
    KIND_QUANTILE_MAP: "quantile-map",
    KIND_ENSEMBLE: "ensemble",
    KIND_MANIFEST: "manifest",
}

_HEADER = struct.Struct("<7sHBQ32s")


def _write_container(path, kind: int, payload: bytes) -> str:
    digest = hashlib.sha256(payload).digest()
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, CONTAINER_VERSION, kind, len(payload), digest))
        fh.write(payload)
    return digest.hex()


def _read_container(path, expected_kind: int | None = None) -> tuple[int, bytes, str]:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise CorruptArtifactError(f"{path}: truncated header")
    magic, version, kind, length, digest = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise CorruptArtifactError(f"{path}: bad magic, not a vehids artifact")
    if version != CONTAINER_VERSION:
        raise ArtifactVersionError(
            f"{path}: container version {version}, this build reads "
            f"{CONTAINER_VERSION}; re-create or upgrade the artifact"
        )
    payload = data[_HEADER.size :]
    if len(payload) != length:
        raise CorruptArtifactError(
            f"{path}: payload length {len(payload)} != declared {length}"
        )
    if hashlib.sha256(payload).digest() != digest:
        raise CorruptArtifactError(f"{path}: payload hash mismatch")
    if expected_kind is not None and kind != expected_kind:
        raise CorruptArtifactError(
            f"{path}: expected {_KIND_NAMES.get(expected_kind)}, "
            f"found {_KIND_NAMES.get(kind, kind)}"
        )
    return kind, payload, digest.hex()


def content_hash(path) -> str:
    """Payload SHA-256 of an artifact file (its content identity)."""
    _, _, digest = _read_container(path)
    return digest


# ---------------------------------------------------------------------------
# Payload codecs
# ---------------------------------------------------------------------------

def _encode_qmap(qmap: QuantileMap) -> bytes:
    refs = np.ascontiguousarray(qmap.references.astype("<f8", copy=False))
    header = json.dumps(
        {
            "n_features": qmap.n_features,
            "n_quantiles": qmap.n_quantiles,
            "clip_sigma": qmap.clip_sigma,
            "fit_source": qmap.fit_source,
        },
        sort_keys=True,
    ).encode("utf-8")
    return struct.pack("<I", len(header)) + header + refs.tobytes()


def _decode_qmap(payload: bytes) -> QuantileMap:
    (hlen,) = struct.unpack_from("<I", payload, 0)
    meta = json.loads(payload[4 : 4 + hlen].decode("utf-8"))
    refs = np.frombuffer(
        payload, dtype="<f8", offset=4 + hlen,
        count=meta["n_features"] * meta["n_quantiles"],
    ).reshape(meta["n_features"], meta["n_quantiles"])
    return QuantileMap(
        references=refs.copy(),
        n_quantiles=meta["n_quantiles"],
        clip_sigma=meta["clip_sigma"],
        fit_source=meta["fit_source"],
    )


def _encode_ensemble(ens: EnsembleModel, base_hashes: list[str],
                     base_files: list[str]) -> bytes:
    head_meta = None
    blob = b""
    if ens.concat_head is not None:
        dense = [l for l in ens.concat_head.layers if isinstance(l, Dense)][0]
        w = np.ascontiguousarray(dense.params["w"].astype("<f4", copy=False))
        b = np.ascontiguousarray(dense.params["b"].astype("<f4", copy=False))
        head_meta = {
            "in_dim": dense.in_dim,
            "out_dim": dense.out_dim,
            "dropout_rate": ens.concat_head.config.dropout_rate,
            "config": _config_to_dict(ens.concat_head.config),
            "w_shape": list(w.shape),
            "b_shape": list(b.shape),
        }
        blob = w.tobytes() + b.tobytes()
    header = json.dumps(
        {
            "strategy": ens.strategy,
            "k": ens.k,
            "num_classes": ens.num_classes,
            "input_shape": list(ens.input_shape),
            "dense_widths": [m.dense_width for m in ens.base_models],
            "base_hashes": base_hashes,
            "base_files": base_files,
            "head": head_meta,
        },
        sort_keys=True,
    ).encode("utf-8")
    return struct.pack("<I", len(header)) + header + blob


def _decode_ensemble(payload: bytes, model_dir) -> EnsembleModel:
    (hlen,) = struct.unpack_from("<I", payload, 0)
    meta = json.loads(payload[4 : 4 + hlen].decode("utf-8"))
    if model_dir is None:
        raise ConfigError("loading an ensemble requires model_dir for its base models")
    model_dir = Path(model_dir)

    bases = []
    for fname, expected in zip(meta["base_files"], meta["base_hashes"]):
        path = model_dir / fname
        if not path.exists():
            raise CorruptArtifactError(f"base model file missing: {path}")
        if content_hash(path) != expected:
            raise CorruptArtifactError(
                f"{path}: content hash does not match the ensemble reference"
            )
        bases.append(load_model(path))

    head = None
    if meta["head"] is not None:
        hm = meta["head"]
        config = _config_from_dict(hm["config"])
        rng = np.random.Generator(np.random.PCG64(0))
        dense = Dense(hm["in_dim"], hm["out_dim"], rng)
        offset = 4 + hlen
        w = np.frombuffer(payload, dtype="<f4", offset=offset,
                          count=int(np.prod(hm["w_shape"]))).reshape(hm["w_shape"])
        offset += w.nbytes
        b = np.frombuffer(payload, dtype="<f4", offset=offset,
                          count=int(np.prod(hm["b_shape"]))).reshape(hm["b_shape"])
        dense.params = {"w": w.copy(), "b": b.copy()}
        layers = [Flatten()]
        if hm["dropout_rate"] > 0:
            layers.append(Dropout(hm["dropout_rate"]))
        layers.append(dense)
        head = CnnModel(
            layers=layers,
            num_classes=hm["out_dim"],
            input_shape=(hm["in_dim"],),
            config=config,
            feature_index=None,
        )
    return EnsembleModel(base_models=bases, strategy=meta["strategy"], concat_head=head)


# ---------------------------------------------------------------------------
# Public save/load API
# ---------------------------------------------------------------------------

def save_model(model: CnnModel, path) -> str:
    return _write_container(path, KIND_MODEL, encode_model(model))


def load_model(path) -> CnnModel:
    _, payload, _ = _read_container(path, KIND_MODEL)
    return decode_model(payload)


def save_quantile_map(qmap: QuantileMap, path) -> str:
    return _write_container(path, KIND_QUANTILE_MAP, _encode_qmap(qmap))


def load_quantile_map(path) -> QuantileMap:
    _, payload, _ = _read_container(path, KIND_QUANTILE_MAP)
    return _decode_qmap(payload)


def save_ensemble(ens: EnsembleModel, path, base_paths: list) -> str:
    """Persist strategy metadata, head weights, and base-model references.

    ``base_paths`` are the artifact files of the base models, in model
    order; the ensemble stores their content hashes, not their weights.
    """
    if len(base_paths) != ens.k:
        raise ConfigError("one base artifact path per base model required")
    hashes = [content_hash(p) for p in base_paths]
    files = [Path(p).name for p in base_paths]
    return _write_container(path, KIND_ENSEMBLE, _encode_ensemble(ens, hashes, files))


def load_ensemble(path, model_dir) -> EnsembleModel:
    _, payload, _ = _read_container(path, KIND_ENSEMBLE)
    return _decode_ensemble(payload, model_dir)


def save_manifest(doc: dict, path) -> str:
    payload = json.dumps(doc, sort_keys=True, indent=2).encode("utf-8")
    return _write_container(path, KIND_MANIFEST, payload)


def load_manifest(path) -> dict:
    _, payload, _ = _read_container(path, KIND_MANIFEST)
    return json.loads(payload.decode("utf-8"))


_SAVERS = {
    CnnModel: save_model,
    QuantileMap: save_quantile_map,
    dict: save_manifest,
}


def save_artifact(obj, path, **kwargs) -> str:
    """Type-dispatched save; returns the payload content hash."""
    if isinstance(obj, EnsembleModel):
        return save_ensemble(obj, path, **kwargs)
    for cls, fn in _SAVERS.items():
        if isinstance(obj, cls):
            return fn(obj, path)
    raise ConfigError(f"do not know how to persist {type(obj).__name__}")


def load_artifact(path, model_dir=None):
    """Load any artifact kind, verifying framing and payload hash."""
    kind, payload, _ = _read_container(path)
    if kind == KIND_MODEL:
        return decode_model(payload)
    if kind == KIND_QUANTILE_MAP:
        return _decode_qmap(payload)
    if kind == KIND_ENSEMBLE:
        return _decode_ensemble(payload, model_dir)
    if kind == KIND_MANIFEST:
        return json.loads(payload.decode("utf-8"))
    raise CorruptArtifactError(f"{path}: unknown artifact kind {kind}")
