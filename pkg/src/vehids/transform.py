"""Quantile normalization to pixel intensities and record-to-image chunking.

The normalizer maps each raw value through the fitted per-feature empirical
distribution onto a standard normal, clamps at ``clip_sigma``, and scales
linearly to 0-255. Consecutive records are then stacked into square
three-channel images: within a chunk, record ``s`` lands in channel
``s // H``, row ``s % H``, with features along the columns.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.special import ndtri

from .errors import ContractError, FitError, NumericError, ShapeError
from .ingest import NORMAL_CLASS, TrafficRecord


@dataclass(frozen=True)
class QuantileMap:
    """Fitted per-feature quantile normalizer.

    ``references[f]`` holds ``n_quantiles`` evenly spaced empirical
    quantiles of feature ``f`` (levels 0..1 inclusive, non-decreasing).
    ``fit_source`` is a provenance tag asserting that the fit used
    training-split records only.
    """

    references: np.ndarray  # (n_features, n_quantiles) float64
    n_quantiles: int
    clip_sigma: float
    fit_source: str = "unspecified"

    def __post_init__(self):
        refs = self.references
        if refs.ndim != 2 or refs.shape[1] != self.n_quantiles:
            raise ShapeError(f"references shape {refs.shape} inconsistent")
        if self.n_quantiles < 2:
            raise FitError("n_quantiles must be >= 2")
        if self.clip_sigma <= 0:
            raise FitError("clip_sigma must be positive")
        if np.any(np.diff(refs, axis=1) < 0):
            raise FitError("reference values must be non-decreasing per feature")

    @property
    def n_features(self) -> int:
        return int(self.references.shape[0])


@dataclass(frozen=True)
class ChunkSpec:
    """Geometry of one image chunk: H x W x 3 built from 3H records."""

    height: int
    width: int
    channels: int = 3

    def __post_init__(self):
        if self.height < 1 or self.width < 1:
            raise ContractError("chunk dimensions must be positive")
        if self.channels != 3:
            raise ContractError("chunk images are fixed at three channels")

    @property
    def chunk_len(self) -> int:
        return self.channels * self.height


CAN_CHUNK = ChunkSpec(height=9, width=9)
FLOW_CHUNK = ChunkSpec(height=20, width=20)


@dataclass(frozen=True)
class ImageChunk:
    pixels: np.ndarray  # (H, W, 3) uint8
    label: int
    chunk_index: int
    time_span: tuple[float, float]


def _feature_matrix(records: list[TrafficRecord]) -> np.ndarray:
    return np.asarray([r.features for r in records], dtype=np.float64)


def fit_quantile_map(
    records: list[TrafficRecord],
    n_quantiles: int = 1000,
    clip_sigma: float = 5.0,
    fit_source: str = "unspecified",
) -> QuantileMap:
    """Fit per-feature reference quantiles on training-split records.

    Stores ``n_quantiles`` evenly spaced empirical quantiles per feature
    (linear interpolation, levels 0..1), so ``n_quantiles`` equal to the
    sample size reproduces the sorted sample exactly.
    """
    if not records:
        raise FitError("cannot fit a quantile map on an empty record list")
    if n_quantiles < 2:
        raise FitError("n_quantiles must be >= 2")
    values = _feature_matrix(records)
    if not np.all(np.isfinite(values)):
        raise NumericError("non-finite feature values in the fit sample")
    refs = _even_quantiles(values, n_quantiles)  # (n_features, n_quantiles)
    return QuantileMap(
        references=np.ascontiguousarray(refs),
        n_quantiles=n_quantiles,
        clip_sigma=float(clip_sigma),
        fit_source=fit_source,
    )


def _even_quantiles(values: np.ndarray, n_quantiles: int) -> np.ndarray:
    """Per-feature quantiles at levels k/(n-1), linearly interpolated.

    Index arithmetic stays in integers so a level that lands on an order
    statistic returns it exactly; with ``n_quantiles`` equal to the sample
    size the result is the sorted sample itself.
    """
    srt = np.sort(values, axis=0)
    n = values.shape[0]
    num = np.arange(n_quantiles, dtype=np.int64) * (n - 1)
    den = n_quantiles - 1
    base = num // den
    frac = (num % den) / den
    upper = np.minimum(base + 1, n - 1)
    lo = srt[base, :]
    hi = srt[upper, :]
    return (lo + frac[:, None] * (hi - lo)).T


def _positions(n_quantiles: int) -> np.ndarray:
    # Midpoint rank convention: node k sits at probability (k + 0.5) / n.
    return (np.arange(n_quantiles) + 0.5) / n_quantiles


def _apply_feature(values: np.ndarray, refs: np.ndarray, clip_sigma: float) -> np.ndarray:
    """Pixel intensities for one feature column. Monotone non-decreasing."""
    pos = _positions(refs.shape[0])
    # Two-sided interpolation: exact at unique nodes, midpoint on plateaus
    # of duplicated reference values.
    fwd = np.interp(values, refs, pos)
    bwd = -np.interp(-values, -refs[::-1], -pos[::-1])
    p = 0.5 * (fwd + bwd)
    z = np.clip(ndtri(p), -clip_sigma, clip_sigma)
    scaled = (z + clip_sigma) / (2.0 * clip_sigma) * 255.0
    pix = np.floor(scaled + 0.5)  # round half away from zero (values >= 0)
    # Strictly outside the fitted range -> saturate.
    pix[values < refs[0]] = 0.0
    pix[values > refs[-1]] = 255.0
    return pix.astype(np.uint8)


def apply_quantile_map(qmap: QuantileMap, raw: np.ndarray | list | tuple) -> np.ndarray:
    """Map one raw feature vector to pixel intensities 0-255."""
    vec = np.asarray(raw, dtype=np.float64)
    if vec.ndim != 1 or vec.shape[0] != qmap.n_features:
        raise ShapeError(
            f"expected a vector of {qmap.n_features} features, got shape {vec.shape}"
        )
    if not np.all(np.isfinite(vec)):
        raise NumericError("non-finite value in feature vector")
    out = np.empty(qmap.n_features, dtype=np.uint8)
    for f in range(qmap.n_features):
        out[f] = _apply_feature(vec[f : f + 1], qmap.references[f], qmap.clip_sigma)[0]
    return out


def apply_quantile_map_matrix(qmap: QuantileMap, values: np.ndarray) -> np.ndarray:
    """Vectorized :func:`apply_quantile_map` over an (N, n_features) matrix."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2 or values.shape[1] != qmap.n_features:
        raise ShapeError(
            f"expected (N, {qmap.n_features}) matrix, got shape {values.shape}"
        )
    if not np.all(np.isfinite(values)):
        raise NumericError("non-finite value in feature matrix")
    out = np.empty(values.shape, dtype=np.uint8)
    for f in range(qmap.n_features):
        out[:, f] = _apply_feature(values[:, f], qmap.references[f], qmap.clip_sigma)
    return out


def label_chunk(labels, attack_priority: bool = True) -> int:
    """Label for a chunk of record labels.

    With ``attack_priority`` (default), any attack record makes the chunk
    an attack chunk, labeled by the most frequent attack class; a chunk is
    Normal only when every record is Normal. Ties break to the lowest
    class index. With ``attack_priority=False`` the plain plurality over
    all labels (Normal included) wins instead.
    """
    arr = np.asarray(labels, dtype=np.int64)
    if arr.size == 0:
        raise ContractError("label_chunk needs a non-empty label list")
    counts = np.bincount(arr)
    if attack_priority:
        if counts.size <= 1 or counts[1:].max() == 0:
            return NORMAL_CLASS
        return int(np.argmax(counts[1:]) + 1)
    return int(np.argmax(counts))


def chunk_records(
    records: list[TrafficRecord],
    spec: ChunkSpec,
    qmap: QuantileMap,
    attack_priority: bool = True,
) -> list[ImageChunk]:
    """Assemble time-ordered records into labeled H x W x 3 images.

    Consecutive non-overlapping groups of ``spec.chunk_len`` records form
    one image each; a trailing partial group is dropped. Record ``s`` of a
    chunk fills channel ``s // H``, row ``s % H``.
    """
    n = len(records)
    chunk_len = spec.chunk_len
    n_chunks = n // chunk_len
    if n_chunks == 0:
        return []

    ts = np.asarray([r.timestamp for r in records], dtype=np.float64)
    if np.any(np.diff(ts) < 0):
        raise ContractError("records must be time-ordered for chunking")

    values = _feature_matrix(records)
    if values.shape[1] != spec.width:
        raise ShapeError(
            f"records carry {values.shape[1]} features but chunk width is {spec.width}"
        )
    used = n_chunks * chunk_len
    pixels = apply_quantile_map_matrix(qmap, values[:used])
    labels = np.asarray([r.label for r in records[:used]], dtype=np.int64)

    # (chunks, chunk_len, W) -> (chunks, channels, H, W) -> (chunks, H, W, channels)
    stacked = pixels.reshape(n_chunks, spec.channels, spec.height, spec.width)
    stacked = np.ascontiguousarray(stacked.transpose(0, 2, 3, 1))

    chunks = []
    for i in range(n_chunks):
        lo, hi = i * chunk_len, (i + 1) * chunk_len
        chunks.append(
            ImageChunk(
                pixels=stacked[i],
                label=label_chunk(labels[lo:hi], attack_priority=attack_priority),
                chunk_index=i,
                time_span=(float(ts[lo]), float(ts[hi - 1])),
            )
        )
    return chunks


# ---------------------------------------------------------------------------
# Image export
# ---------------------------------------------------------------------------

INDEX_FILE = "index.csv"
INDEX_HEADER = ["chunk_index", "label", "first_timestamp", "last_timestamp"]


def export_image(image: ImageChunk, path) -> None:
    """Write one chunk as a lossless 8-bit RGB PNG."""
    if image.pixels.dtype != np.uint8 or image.pixels.ndim != 3:
        raise ShapeError(f"expected uint8 HxWx3 pixels, got {image.pixels.dtype}")
    try:
        Image.fromarray(image.pixels, mode="RGB").save(path, format="PNG")
    except OSError as exc:
        raise OSError(f"failed to write image {path}: {exc}") from exc


def export_images(
    images: list[ImageChunk], out_dir, class_names: tuple[str, ...]
) -> Path:
    """Export all chunks plus the index file; returns the index path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    index_path = out / INDEX_FILE
    with open(index_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(INDEX_HEADER)
        for img in images:
            name = f"chunk_{img.chunk_index}_{class_names[img.label]}.png"
            export_image(img, out / name)
            writer.writerow(
                [img.chunk_index, img.label,
                 f"{img.time_span[0]:.6f}", f"{img.time_span[1]:.6f}"]
            )
    return index_path


def import_image(path) -> np.ndarray:
    """Read back an exported PNG as an (H, W, 3) uint8 tensor."""
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


def load_image_set(out_dir) -> tuple[np.ndarray, np.ndarray]:
    """Load an exported image directory into (X, y) arrays via its index."""
    out = Path(out_dir)
    index_path = out / INDEX_FILE
    if not index_path.exists():
        raise FileNotFoundError(f"no {INDEX_FILE} in {out}")
    pixels, labels = [], []
    with open(index_path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        rows = sorted(reader, key=lambda r: int(r["chunk_index"]))
    by_index = {}
    for p in out.glob("chunk_*.png"):
        by_index[int(p.name.split("_")[1])] = p
    for row in rows:
        idx = int(row["chunk_index"])
        pixels.append(import_image(by_index[idx]))
        labels.append(int(row["label"]))
    return np.stack(pixels), np.asarray(labels, dtype=np.int64)
