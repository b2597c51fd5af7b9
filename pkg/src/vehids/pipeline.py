"""End-to-end stages: transform, tune, train, ensemble, evaluate.

The CLI is a thin shell over these functions; the acceptance suite calls
them directly. Every stage is a pure function of its config and seeds.
"""

from __future__ import annotations

import hashlib
import time
from dataclasses import dataclass, field

import numpy as np

from . import pso
from .cnn import CnnConfig, CnnModel, TrainReport, build_cnn, fine_tune, train
from .ensemble import (
    AVERAGING,
    CONCATENATION,
    EnsembleModel,
    build_averaging,
    build_concatenated,
    predict_labels,
    select_top_k,
)
from .errors import ConfigError
from .evaluation import (
    ConfusionMatrix,
    MetricsReport,
    confusion,
    kfold_split,
    metrics,
    stratified_holdout,
)
from .ingest import TrafficRecord
from .transform import ChunkSpec, ImageChunk, QuantileMap, chunk_records, fit_quantile_map

# Five compact variants standing in for the five backbone architectures;
# they differ in depth and filter/dense widths so top-3 selection has
# something real to rank.
VARIANT_SPECS: tuple[tuple[str, tuple[int, ...], int], ...] = (
    ("cnn-a", (16,), 48),
    ("cnn-b", (24,), 64),
    ("cnn-c", (8, 16), 48),
    ("cnn-d", (12, 24), 64),
    ("cnn-e", (16, 32), 96),
)


def derive_seed(*parts: int) -> int:
    """Stable 32-bit seed from a tuple of integers."""
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


def variant_config(hyper: dict, variant: int, seed: int) -> CnnConfig:
    """Table-I style hyper-parameters applied to one architecture variant."""
    name, blocks, dense = VARIANT_SPECS[variant % len(VARIANT_SPECS)]
    return CnnConfig(
        conv_blocks=blocks,
        dense_width=dense,
        dropout_rate=float(hyper.get("dropout_rate", 0.5)),
        learning_rate=float(hyper.get("learning_rate", 0.003)),
        batch_size=int(hyper.get("batch_size", 128)),
        max_epochs=int(hyper.get("max_epochs", 20)),
        early_stop_patience=int(hyper.get("early_stop_patience", 3)),
        frozen_layers=int(hyper.get("frozen_layers", 0)),
        rng_seed=seed,
    )


def variant_name(variant: int) -> str:
    return VARIANT_SPECS[variant % len(VARIANT_SPECS)][0]


def n_weighted_layers(variant: int) -> int:
    blocks, dense = VARIANT_SPECS[variant % len(VARIANT_SPECS)][1:]
    return len(blocks) + (1 if dense else 0) + 1


# ---------------------------------------------------------------------------
# Transform stage
# ---------------------------------------------------------------------------

def build_image_set(
    sources: list[list[TrafficRecord]],
    chunk: ChunkSpec,
    n_quantiles: int = 1000,
    clip_sigma: float = 5.0,
    fit_fraction: float = 0.8,
    fit_source: str = "unspecified",
    attack_priority: bool = True,
) -> tuple[QuantileMap, list[ImageChunk]]:
    """Fit the quantile map on the leading ``fit_fraction`` of each source,
    then chunk every source; chunk indices continue across sources."""
    if not sources or all(not s for s in sources):
        raise ConfigError("no input records to transform")
    if not 0.0 < fit_fraction <= 1.0:
        raise ConfigError(f"fit_fraction {fit_fraction} outside (0, 1]")
    fit_records: list[TrafficRecord] = []
    for records in sources:
        fit_records.extend(records[: max(1, int(len(records) * fit_fraction))])
    qmap = fit_quantile_map(
        fit_records, n_quantiles=n_quantiles, clip_sigma=clip_sigma,
        fit_source=f"{fit_source} [leading {fit_fraction:.0%} per source]",
    )
    images: list[ImageChunk] = []
    offset = 0
    for records in sources:
        chunks = chunk_records(records, chunk, qmap, attack_priority=attack_priority)
        for c in chunks:
            images.append(ImageChunk(c.pixels, c.label, c.chunk_index + offset, c.time_span))
        offset += len(chunks)
    return qmap, images


def images_to_arrays(images: list[ImageChunk]) -> tuple[np.ndarray, np.ndarray]:
    x = np.stack([img.pixels for img in images])
    y = np.asarray([img.label for img in images], dtype=np.int64)
    return x, y


def image_set_hash(images: list[ImageChunk]) -> str:
    """Content hash of a transformed image set (pixels + labels, in order)."""
    h = hashlib.sha256()
    for img in images:
        h.update(np.int64(img.chunk_index).tobytes())
        h.update(np.int64(img.label).tobytes())
        h.update(np.ascontiguousarray(img.pixels).tobytes())
    return h.hexdigest()


def model_weights_hash(model: CnnModel) -> str:
    h = hashlib.sha256()
    for layer in model.weighted_layers:
        for name in sorted(layer.params):
            h.update(np.ascontiguousarray(layer.params[name]).tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# Train stage
# ---------------------------------------------------------------------------

@dataclass
class TrainedVariant:
    variant: int
    name: str
    model: CnnModel
    report: TrainReport
    val_macro_f1: float


def train_variants(
    x_train: np.ndarray,
    y_train: np.ndarray,
    hyper: dict,
    n_variants: int,
    seed: int,
    val_fraction: float = 0.2,
    pretrained: CnnModel | None = None,
) -> tuple[list[TrainedVariant], tuple[np.ndarray, np.ndarray]]:
    """Train the compact variants on one split.

    A stratified ``val_fraction`` of the training data is held out for
    early stopping and scoring; it is returned for reuse (e.g. to train a
    concatenation head with the same guard). With ``pretrained``, each
    variant fine-tunes that model instead of training from scratch.
    """
    num_classes = int(y_train.max()) + 1
    tr_idx, val_idx = stratified_holdout(y_train, val_fraction, derive_seed(seed, 97))
    tr = (x_train[tr_idx], y_train[tr_idx])
    val = (x_train[val_idx], y_train[val_idx])

    out: list[TrainedVariant] = []
    for v in range(n_variants):
        config = variant_config(hyper, v, derive_seed(seed, v))
        if pretrained is not None:
            model, report = fine_tune(
                pretrained, tr, val, config.frozen_layers, config
            )
        else:
            model = build_cnn(config, tuple(x_train.shape[1:]), num_classes)
            model, report = train(model, tr, val, config)
        preds = _batched_labels(model, val[0])
        val_f1 = metrics(confusion(val[1], preds, num_classes)).macro_f1
        out.append(TrainedVariant(v, variant_name(v), model, report, val_f1))
    return out, val


def _batched_labels(model: CnnModel, x: np.ndarray, batch: int = 512) -> np.ndarray:
    from .cnn import images_to_tensor

    xs = images_to_tensor(x, model.dtype)
    parts = []
    for lo in range(0, len(xs), batch):
        parts.append(model.forward_logits(xs[lo : lo + batch]).argmax(axis=1))
    return np.concatenate(parts)


# ---------------------------------------------------------------------------
# Ensemble + cross-validated evaluation
# ---------------------------------------------------------------------------

@dataclass
class StrategyResult:
    strategy: str
    matrix: ConfusionMatrix
    report: MetricsReport
    training_seconds: float


@dataclass
class CvResult:
    strategies: dict[str, StrategyResult]
    fold_variants: list[list[TrainedVariant]]
    folds: int
    ensembles: dict[str, EnsembleModel] = field(default_factory=dict)

    def macro_f1(self, strategy: str) -> float:
        return self.strategies[strategy].report.macro_f1


def build_strategy_ensemble(
    strategy: str,
    top_models: list[CnnModel],
    train_set: tuple[np.ndarray, np.ndarray],
    val_set: tuple[np.ndarray, np.ndarray],
    hyper: dict,
    seed: int,
) -> EnsembleModel:
    if strategy == AVERAGING:
        return build_averaging(top_models)
    if strategy == CONCATENATION:
        head_config = variant_config(hyper, 0, derive_seed(seed, 555))
        return build_concatenated(top_models, train_set, val_set, head_config)
    raise ConfigError(f"unknown strategy {strategy!r}")


def run_cv(
    x: np.ndarray,
    y: np.ndarray,
    hyper: dict,
    n_variants: int = 5,
    k: int = 3,
    seed: int = 0,
    folds: int = 5,
    strategies: tuple[str, ...] = (AVERAGING, CONCATENATION),
) -> CvResult:
    """Per fold: train all variants, keep the top k by validation macro-F1,
    build each strategy, predict the held-out fold. Confusions accumulate
    across folds into one report per strategy."""
    num_classes = int(y.max()) + 1
    plan = kfold_split(len(y), folds, y, derive_seed(seed, 11))

    pooled_true: list[np.ndarray] = []
    pooled_pred: dict[str, list[np.ndarray]] = {s: [] for s in strategies}
    train_walls = {s: 0.0 for s in strategies}
    fold_variants: list[list[TrainedVariant]] = []
    last_ensembles: dict[str, EnsembleModel] = {}

    for f in range(folds):
        train_idx, test_idx = plan.train_test(f)
        started = time.perf_counter()
        variants, val = train_variants(
            x[train_idx], y[train_idx], hyper, n_variants, derive_seed(seed, f)
        )
        base_wall = time.perf_counter() - started
        fold_variants.append(variants)

        ranked = select_top_k(variants, [tv.val_macro_f1 for tv in variants], k)
        top_models = [tv.model for tv in ranked]
        pooled_true.append(y[test_idx])

        for strategy in strategies:
            t0 = time.perf_counter()
            ens = build_strategy_ensemble(
                strategy, top_models, (x[train_idx], y[train_idx]), val, hyper,
                derive_seed(seed, f, 7),
            )
            train_walls[strategy] += base_wall + (time.perf_counter() - t0)
            pooled_pred[strategy].append(predict_labels(ens, x[test_idx]))
            last_ensembles[strategy] = ens

    true_all = np.concatenate(pooled_true)
    results = {}
    for strategy in strategies:
        matrix = confusion(true_all, np.concatenate(pooled_pred[strategy]), num_classes)
        results[strategy] = StrategyResult(
            strategy=strategy,
            matrix=matrix,
            report=metrics(matrix),
            training_seconds=train_walls[strategy],
        )
    return CvResult(
        strategies=results, fold_variants=fold_variants, folds=folds,
        ensembles=last_ensembles,
    )


# ---------------------------------------------------------------------------
# Tune stage
# ---------------------------------------------------------------------------

def make_tuning_objective(
    x: np.ndarray,
    y: np.ndarray,
    space: pso.SearchSpace,
    variant: int,
    seed: int,
    pretrained: CnnModel | None = None,
):
    """Objective: validation macro-F1 of the variant trained with the
    decoded hyper-parameters (maximized)."""
    num_classes = int(y.max()) + 1
    tr_idx, val_idx = stratified_holdout(y, 0.2, derive_seed(seed, 31))
    tr = (x[tr_idx], y[tr_idx])
    val = (x[val_idx], y[val_idx])

    def objective(position: np.ndarray) -> float:
        hyper = pso.decode_position(space, position)
        config = variant_config(hyper, variant, derive_seed(seed, 13))
        config.validate(tuner_ranges=True)
        if pretrained is not None:
            model, _ = fine_tune(pretrained, tr, val, config.frozen_layers, config)
        else:
            model = build_cnn(config, tuple(x.shape[1:]), num_classes)
            model, _ = train(model, tr, val, config)
        preds = _batched_labels(model, val[0])
        return metrics(confusion(val[1], preds, num_classes)).macro_f1

    return objective


def tune_hyperparameters(
    x: np.ndarray,
    y: np.ndarray,
    variant: int = 0,
    swarm_size: int = 8,
    iterations: int = 5,
    seed: int = 0,
    skip: bool = False,
    pretrained: CnnModel | None = None,
) -> tuple[dict, float, pso.OptimizeTrace | None]:
    """PSO over the Table-I space, or the reported optimal values with
    ``skip`` (no search)."""
    if skip:
        return dict(pso.OPTIMAL_HYPERPARAMS), float("nan"), None
    frozen_bounds = (0, n_weighted_layers(variant)) if pretrained is not None else None
    space = pso.hyperparameter_space(frozen_bounds)
    objective = make_tuning_objective(x, y, space, variant, seed, pretrained)
    best, score, trace = pso.optimize(
        space, objective, swarm_size=swarm_size, iterations=iterations, seed=seed
    )
    return best, score, trace
