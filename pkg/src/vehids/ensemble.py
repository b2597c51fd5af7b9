"""Top-k model selection and the two combination strategies.

Confidence averaging takes the argmax of the per-class arithmetic mean of
the base models' probability vectors; per-class sums use ``math.fsum`` so
the result is exactly invariant to model order. Concatenation joins the
base models' top dense-layer features and trains a fresh dropout+softmax
head on them, leaving base weights untouched.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .cnn import (
    CnnConfig,
    CnnModel,
    TrainReport,
    extract_dense_features,
    predict_proba,
    softmax,
    train,
)
from .cnn.layers import Dense, Dropout, Flatten
from .cnn.model import CnnModel as _CnnModel
from .errors import ConfigError, ShapeError, StructureError

AVERAGING = "confidence_averaging"
CONCATENATION = "concatenation"


@dataclass(frozen=True)
class ClassDecision:
    """Final label with its confidence and the per-model audit trail."""

    label: int
    confidence: float
    model_probs: tuple[tuple[float, ...], ...]
    combined: tuple[float, ...] = ()


def select_top_k(models: list, scores: list[float], k: int) -> list:
    """The k models with the highest validation score; ties keep the
    earlier-trained model."""
    if k > len(models):
        raise ConfigError(f"cannot select top {k} of {len(models)} models")
    if len(scores) != len(models):
        raise ConfigError("one validation score per model required")
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
    return [models[int(i)] for i in order[:k]]


def confidence_average(prob_vectors) -> ClassDecision:
    """Element-wise mean of k probability vectors; argmax wins, ties to the
    lowest class index."""
    mat = [np.asarray(p, dtype=np.float64) for p in prob_vectors]
    if not mat:
        raise ShapeError("need at least one probability vector")
    c = mat[0].shape[0]
    for p in mat:
        if p.shape != (c,):
            raise ShapeError(f"probability vectors disagree on length: {p.shape} vs ({c},)")
        if abs(float(p.sum()) - 1.0) > 1e-6:
            raise ShapeError("probability vector does not sum to 1")
    k = len(mat)
    mean = np.asarray([math.fsum(p[i] for p in mat) / k for i in range(c)])
    label = int(np.argmax(mean))
    return ClassDecision(
        label=label,
        confidence=float(mean[label]),
        model_probs=tuple(tuple(float(x) for x in p) for p in mat),
        combined=tuple(float(x) for x in mean),
    )


@dataclass
class EnsembleModel:
    base_models: list[CnnModel]
    strategy: str
    concat_head: _CnnModel | None = None
    head_report: TrainReport | None = None

    def __post_init__(self):
        if self.strategy not in (AVERAGING, CONCATENATION):
            raise ConfigError(f"unknown ensemble strategy {self.strategy!r}")
        if not self.base_models:
            raise ConfigError("ensemble needs at least one base model")
        shape = self.base_models[0].input_shape
        classes = self.base_models[0].num_classes
        for m in self.base_models[1:]:
            if m.input_shape != shape or m.num_classes != classes:
                raise ConfigError("base models disagree on input shape or classes")
        if self.strategy == CONCATENATION and self.concat_head is None:
            raise ConfigError("concatenation ensemble requires a trained head")

    @property
    def k(self) -> int:
        return len(self.base_models)

    @property
    def num_classes(self) -> int:
        return self.base_models[0].num_classes

    @property
    def input_shape(self):
        return self.base_models[0].input_shape

    @property
    def feature_length(self) -> int:
        return sum(m.dense_width for m in self.base_models)


def concat_features(models: list[CnnModel], images: np.ndarray) -> np.ndarray:
    """Length-F feature rows: base dense features concatenated in model order."""
    parts = [extract_dense_features(m, images) for m in models]
    return np.concatenate([np.atleast_2d(p) for p in parts], axis=-1)


def _build_head(feature_len: int, num_classes: int, config: CnnConfig) -> _CnnModel:
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([config.rng_seed, 3])))
    layers = [Flatten()]
    if config.dropout_rate > 0:
        layers.append(Dropout(config.dropout_rate))
    layers.append(Dense(feature_len, num_classes, rng))
    return _CnnModel(
        layers=layers,
        num_classes=num_classes,
        input_shape=(feature_len,),
        config=config,
        feature_index=None,
    )


def build_concatenated(
    models: list[CnnModel],
    train_set: tuple[np.ndarray, np.ndarray],
    val_set: tuple[np.ndarray, np.ndarray],
    config: CnnConfig,
) -> EnsembleModel:
    """Train a dropout+softmax head over the concatenated dense features.

    Base model weights are never touched; only the head is retrained, on
    features extracted from the training images.
    """
    for m in models:
        if m.feature_index is None:
            raise StructureError("every base model needs a dense feature layer")
    feature_len = sum(m.dense_width for m in models)
    x_train = concat_features(models, train_set[0]).astype(np.float32)
    x_val = concat_features(models, val_set[0]).astype(np.float32)
    if x_train.shape[1] != feature_len:
        raise StructureError(
            f"extracted feature length {x_train.shape[1]} != expected {feature_len}"
        )
    head = _build_head(feature_len, models[0].num_classes, config)
    head, report = train(head, (x_train, train_set[1]), (x_val, val_set[1]), config)
    return EnsembleModel(
        base_models=list(models),
        strategy=CONCATENATION,
        concat_head=head,
        head_report=report,
    )


def build_averaging(models: list[CnnModel]) -> EnsembleModel:
    return EnsembleModel(base_models=list(models), strategy=AVERAGING)


def predict(ensemble: EnsembleModel, image: np.ndarray) -> ClassDecision:
    """Combine base predictions for one image.

    Averaging costs O(K*C) past the base forward passes; the concatenated
    head costs O(F).
    """
    probs = [predict_proba(m, image) for m in ensemble.base_models]
    if any(p.ndim != 1 for p in probs):
        raise ShapeError("predict combines one image at a time")
    if ensemble.strategy == AVERAGING:
        return confidence_average(probs)
    feats = concat_features(ensemble.base_models, image)
    combined = softmax(ensemble.concat_head.forward_logits(feats.astype(np.float32)))[0]
    label = int(np.argmax(combined))
    return ClassDecision(
        label=label,
        confidence=float(combined[label]),
        model_probs=tuple(tuple(float(x) for x in p) for p in probs),
        combined=tuple(float(x) for x in combined),
    )


def predict_labels(ensemble: EnsembleModel, images: np.ndarray) -> np.ndarray:
    """Batch label predictions (no audit trail), for evaluation loops."""
    if ensemble.strategy == AVERAGING:
        total = np.zeros((len(images), ensemble.num_classes), dtype=np.float64)
        for m in ensemble.base_models:
            total += predict_proba(m, images)
        return np.argmax(total, axis=1)
    feats = concat_features(ensemble.base_models, images).astype(np.float32)
    logits = ensemble.concat_head.forward_logits(feats)
    return np.argmax(logits, axis=1)
