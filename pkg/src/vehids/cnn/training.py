"""Cross-entropy training with adaptive moments, early stopping, freezing."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigError, NumericError, TrainingError
from .model import CnnConfig, CnnModel, images_to_tensor
from .layers import Dense


@dataclass
class TrainReport:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    train_accuracy: list[float] = field(default_factory=list)
    stopped_epoch: int = 0
    best_epoch: int = 0
    wall_seconds: float = 0.0

    def epochs_to_accuracy(self, target: float) -> int | None:
        for i, acc in enumerate(self.train_accuracy, start=1):
            if acc >= target:
                return i
        return None


class Adam:
    """Adaptive-moment updates; decay constants fixed at (0.9, 0.999)."""

    BETA1 = 0.9
    BETA2 = 0.999
    EPS = 1e-8

    def __init__(self, learning_rate: float):
        self.lr = learning_rate
        self.t = 0
        self._m: dict[tuple[int, str], np.ndarray] = {}
        self._v: dict[tuple[int, str], np.ndarray] = {}

    def step(self, model: CnnModel) -> None:
        self.t += 1
        b1c = 1.0 - self.BETA1 ** self.t
        b2c = 1.0 - self.BETA2 ** self.t
        for i, layer in enumerate(model.layers):
            if not layer.params or layer.frozen:
                continue
            for name, grad in layer._raw_grads.items():
                key = (i, name)
                p = layer.params[name]
                m = self._m.setdefault(key, np.zeros_like(p))
                v = self._v.setdefault(key, np.zeros_like(p))
                m *= self.BETA1
                m += (1.0 - self.BETA1) * grad
                v *= self.BETA2
                v += (1.0 - self.BETA2) * grad * grad
                mhat = m / p.dtype.type(b1c)
                vhat = v / p.dtype.type(b2c)
                p -= p.dtype.type(self.lr) * mhat / (np.sqrt(vhat) + p.dtype.type(self.EPS))


class EarlyStopper:
    """Stop after ``patience`` consecutive epochs without improvement."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = np.inf
        self.best_epoch = 0
        self._bad = 0

    def update(self, epoch: int, val_loss: float) -> tuple[bool, bool]:
        """Returns (improved, should_stop) for this epoch."""
        if val_loss < self.best:
            self.best = val_loss
            self.best_epoch = epoch
            self._bad = 0
            return True, False
        self._bad += 1
        return False, self._bad >= self.patience


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over the batch and the logit gradient."""
    z = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    n = logits.shape[0]
    loss = float(-logp[np.arange(n), labels].mean())
    dlogits = np.exp(logp)
    dlogits[np.arange(n), labels] -= 1.0
    return loss, (dlogits / np.asarray(n, dtype=logits.dtype)).astype(logits.dtype)


def _check_dataset(x: np.ndarray, y: np.ndarray, model: CnnModel, role: str) -> None:
    if len(x) == 0:
        raise TrainingError(f"{role} set is empty")
    if x.shape[1:] != model.input_shape:
        raise TrainingError(
            f"{role} images have shape {x.shape[1:]}, model expects {model.input_shape}"
        )
    if y.min() < 0 or y.max() >= model.num_classes:
        raise TrainingError(f"{role} labels outside [0, {model.num_classes})")


def evaluate_loss(model: CnnModel, x: np.ndarray, y: np.ndarray,
                  batch_size: int = 512) -> float:
    total, n = 0.0, len(x)
    for lo in range(0, n, batch_size):
        xb = x[lo : lo + batch_size]
        yb = y[lo : lo + batch_size]
        loss, _ = cross_entropy(model.forward_logits(xb, training=False), yb)
        total += loss * len(xb)
    return total / n


def train(
    model: CnnModel,
    train_set: tuple[np.ndarray, np.ndarray],
    val_set: tuple[np.ndarray, np.ndarray],
    config: CnnConfig | None = None,
) -> tuple[CnnModel, TrainReport]:
    """Mini-batch training with early stopping and best-weight restore.

    Frozen layers receive no optimizer updates; their weights are
    bit-identical afterwards. Deterministic for a fixed config seed.
    """
    started = time.perf_counter()
    config = config or model.config
    config.validate()
    x_train = images_to_tensor(train_set[0], model.dtype)
    y_train = np.asarray(train_set[1], dtype=np.int64)
    x_val = images_to_tensor(val_set[0], model.dtype)
    y_val = np.asarray(val_set[1], dtype=np.int64)
    _check_dataset(x_train, y_train, model, "training")
    _check_dataset(x_val, y_val, model, "validation")

    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([config.rng_seed, 1])))
    adam = Adam(config.learning_rate)
    stopper = EarlyStopper(config.early_stop_patience)
    report = TrainReport()
    best_weights = model.get_weights()
    n = len(x_train)

    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(n)
        epoch_loss = 0.0
        correct = 0
        for lo in range(0, n, config.batch_size):
            idx = order[lo : lo + config.batch_size]
            xb, yb = x_train[idx], y_train[idx]
            logits = model.forward_logits(xb, training=True, rng=rng)
            loss, dlogits = cross_entropy(logits, yb)
            if not np.isfinite(loss):
                raise NumericError(f"training loss diverged (NaN/inf) at epoch {epoch}")
            model.backward(dlogits)
            adam.step(model)
            epoch_loss += loss * len(xb)
            correct += int((logits.argmax(axis=1) == yb).sum())
        report.train_loss.append(epoch_loss / n)
        report.train_accuracy.append(correct / n)

        val_loss = evaluate_loss(model, x_val, y_val)
        if not np.isfinite(val_loss):
            raise NumericError(f"validation loss diverged (NaN/inf) at epoch {epoch}")
        report.val_loss.append(val_loss)

        improved, should_stop = stopper.update(epoch, val_loss)
        if improved:
            best_weights = model.get_weights()
        report.stopped_epoch = epoch
        if should_stop:
            break

    model.set_weights(best_weights)
    report.best_epoch = stopper.best_epoch
    report.wall_seconds = time.perf_counter() - started
    return model, report


def fine_tune(
    pretrained: CnnModel,
    train_set: tuple[np.ndarray, np.ndarray],
    val_set: tuple[np.ndarray, np.ndarray],
    frozen_layers: int,
    config: CnnConfig,
    replace_head: bool = False,
    num_classes: int | None = None,
) -> tuple[CnnModel, TrainReport]:
    """Retrain the top of a pretrained model on a new dataset.

    The bottom ``frozen_layers`` weighted layers keep the pretrained
    weights bit-exactly. A class-count change requires ``replace_head``;
    the fresh head is initialized from the config seed and never counts
    as frozen. The pretrained model itself is left untouched.
    """
    target_classes = num_classes if num_classes is not None else pretrained.num_classes
    if target_classes != pretrained.num_classes and not replace_head:
        raise ConfigError(
            f"model has {pretrained.num_classes} classes, new data has "
            f"{target_classes}; pass replace_head=True to swap the softmax head"
        )
    model = pretrained.clone()
    if replace_head:
        head = model.weighted_layers[-1]
        rng = np.random.Generator(
            np.random.PCG64(np.random.SeedSequence([config.rng_seed, 2]))
        )
        new_head = Dense(head.in_dim, target_classes, rng, dtype=model.dtype)
        model.layers[model.layers.index(head)] = new_head
        model.num_classes = target_classes
    model.set_frozen_layers(frozen_layers, skip_head=replace_head)
    return train(model, train_set, val_set, config)
