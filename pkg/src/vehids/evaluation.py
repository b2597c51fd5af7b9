"""Confusion-matrix metrics, stratified k-fold plans, inference timing."""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError

REALTIME_BUDGET_MS = 10.0


@dataclass(frozen=True)
class ConfusionMatrix:
    counts: np.ndarray  # (C, C), rows = true class, columns = predicted

    @property
    def n_classes(self) -> int:
        return int(self.counts.shape[0])

    @property
    def total(self) -> int:
        return int(self.counts.sum())


@dataclass(frozen=True)
class MetricsReport:
    accuracy: float
    precision: tuple[float, ...]
    recall: tuple[float, ...]
    f1: tuple[float, ...]
    support: tuple[int, ...]
    macro_precision: float
    macro_recall: float
    macro_f1: float
    weighted_precision: float
    weighted_recall: float
    weighted_f1: float
    zero_division_classes: tuple[int, ...] = ()


def confusion(true_labels, predicted_labels, n_classes: int) -> ConfusionMatrix:
    t = np.asarray(true_labels, dtype=np.int64)
    p = np.asarray(predicted_labels, dtype=np.int64)
    if t.shape != p.shape:
        raise ContractError(f"label arrays differ in length: {t.shape} vs {p.shape}")
    if t.size and (t.min() < 0 or t.max() >= n_classes or p.min() < 0 or p.max() >= n_classes):
        raise ContractError(f"labels outside [0, {n_classes})")
    counts = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(counts, (t, p), 1)
    return ConfusionMatrix(counts)


def metrics(matrix: ConfusionMatrix) -> MetricsReport:
    """Accuracy plus per-class and aggregated precision/recall/F1.

    Zero-denominator precision or recall defaults to 0 and the class is
    flagged, never NaN.
    """
    m = matrix.counts
    total = m.sum()
    if total == 0:
        raise ContractError("metrics undefined for an empty confusion matrix")
    diag = np.diag(m).astype(np.float64)
    col = m.sum(axis=0).astype(np.float64)
    row = m.sum(axis=1).astype(np.float64)

    flagged = []
    precision = np.zeros(matrix.n_classes)
    recall = np.zeros(matrix.n_classes)
    for c in range(matrix.n_classes):
        if col[c] > 0:
            precision[c] = diag[c] / col[c]
        else:
            flagged.append(c)
        if row[c] > 0:
            recall[c] = diag[c] / row[c]
        elif c not in flagged:
            flagged.append(c)
    denom = precision + recall
    f1 = np.where(denom > 0, 2.0 * precision * recall / np.where(denom > 0, denom, 1.0), 0.0)

    support = row
    weights = support / total
    return MetricsReport(
        accuracy=float(diag.sum() / total),
        precision=tuple(precision),
        recall=tuple(recall),
        f1=tuple(f1),
        support=tuple(int(s) for s in support),
        macro_precision=float(precision.mean()),
        macro_recall=float(recall.mean()),
        macro_f1=float(f1.mean()),
        weighted_precision=float((precision * weights).sum()),
        weighted_recall=float((recall * weights).sum()),
        weighted_f1=float((f1 * weights).sum()),
        zero_division_classes=tuple(flagged),
    )


@dataclass(frozen=True)
class FoldPlan:
    folds: tuple[tuple[int, ...], ...]
    rng_seed: int

    @property
    def k(self) -> int:
        return len(self.folds)

    def train_test(self, fold: int) -> tuple[np.ndarray, np.ndarray]:
        test = np.asarray(self.folds[fold], dtype=np.int64)
        train = np.concatenate(
            [np.asarray(f, dtype=np.int64) for i, f in enumerate(self.folds) if i != fold]
        )
        return np.sort(train), np.sort(test)


def kfold_split(n: int, k: int, class_labels, seed: int) -> FoldPlan:
    """Stratified shuffled partition into k folds.

    Folds are disjoint, cover all indices, and differ in size by at most
    one, both overall and per class. Classes with fewer than k samples
    fall back to best-effort stratification with a warning.
    """
    if n < k:
        raise ContractError(f"cannot split {n} samples into {k} folds")
    labels = np.asarray(class_labels, dtype=np.int64)
    if labels.shape != (n,):
        raise ContractError(f"expected {n} class labels, got shape {labels.shape}")
    rng = np.random.Generator(np.random.PCG64(seed))

    folds: list[list[int]] = [[] for _ in range(k)]
    loads = np.zeros(k, dtype=np.int64)
    for cls in np.unique(labels):
        idx = np.flatnonzero(labels == cls)
        if len(idx) < k:
            warnings.warn(
                f"class {cls} has {len(idx)} samples (< {k} folds); "
                "stratification is best-effort",
                stacklevel=2,
            )
        idx = rng.permutation(idx)
        base, extra = divmod(len(idx), k)
        # Give every fold `base` samples, then hand the remainder to the
        # currently lightest folds; keeps the overall spread within 1.
        extra_folds = np.argsort(loads, kind="stable")[:extra]
        take = 0
        for f in range(k):
            amount = base + (1 if f in extra_folds else 0)
            folds[f].extend(int(i) for i in idx[take : take + amount])
            take += amount
            loads[f] += amount
    return FoldPlan(
        folds=tuple(tuple(sorted(f)) for f in folds),
        rng_seed=seed,
    )


def stratified_holdout(labels, fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """(train_idx, held_out_idx) with per-class proportional sampling."""
    labels = np.asarray(labels, dtype=np.int64)
    if not 0.0 < fraction < 1.0:
        raise ContractError(f"holdout fraction {fraction} outside (0, 1)")
    rng = np.random.Generator(np.random.PCG64(seed))
    held = []
    for cls in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == cls))
        take = max(1, int(round(len(idx) * fraction))) if len(idx) > 1 else 0
        held.extend(int(i) for i in idx[:take])
    held_arr = np.asarray(sorted(held), dtype=np.int64)
    mask = np.ones(len(labels), dtype=bool)
    mask[held_arr] = False
    return np.flatnonzero(mask), held_arr


@dataclass(frozen=True)
class TimingReport:
    mean_ms: float
    p95_ms: float
    n_images: int
    repetitions: int
    over_budget: bool
    training_seconds: float = 0.0


def time_inference(predictor, images: np.ndarray, repetitions: int = 1,
                   training_seconds: float = 0.0) -> TimingReport:
    """Per-image wall-clock timing; one warm-up pass is excluded.

    ``predictor`` is a callable taking a single image, or a model/ensemble
    exposing one. Flags the run when the mean exceeds the 10 ms per-packet
    real-time budget.
    """
    fn = _single_image_fn(predictor)
    if len(images) < 100:
        raise ContractError("need >= 100 images for stable timing statistics")
    if repetitions < 1:
        raise ContractError("repetitions must be >= 1")

    fn(images[0])  # warm-up
    samples = np.empty(len(images) * repetitions, dtype=np.float64)
    pos = 0
    for _ in range(repetitions):
        for img in images:
            t0 = time.perf_counter()
            fn(img)
            samples[pos] = (time.perf_counter() - t0) * 1000.0
            pos += 1
    mean = float(samples.mean())
    return TimingReport(
        mean_ms=mean,
        p95_ms=float(np.percentile(samples, 95)),
        n_images=len(images),
        repetitions=repetitions,
        over_budget=mean > REALTIME_BUDGET_MS,
        training_seconds=training_seconds,
    )


def _single_image_fn(predictor):
    if callable(predictor):
        return predictor
    from .cnn import predict_proba
    from .ensemble import EnsembleModel, predict as ensemble_predict

    if isinstance(predictor, EnsembleModel):
        return lambda img: ensemble_predict(predictor, img)
    return lambda img: predict_proba(predictor, img)


def summary_row(name: str, report: MetricsReport, timing: TimingReport | None) -> str:
    """One delimited row shaped like the paper's evaluation tables."""
    cells = [
        name,
        f"{report.accuracy * 100:.3f}",
        f"{report.macro_precision * 100:.3f}",
        f"{report.macro_recall * 100:.3f}",
        f"{report.macro_f1 * 100:.3f}",
        f"{timing.training_seconds:.1f}" if timing else "-",
        f"{timing.mean_ms:.3f}" if timing else "-",
    ]
    return "\t".join(cells)


SUMMARY_HEADER = "\t".join([
    "method", "accuracy_pct", "precision_pct", "recall_pct", "f1_pct",
    "training_time_s", "test_time_per_packet_ms",
])
