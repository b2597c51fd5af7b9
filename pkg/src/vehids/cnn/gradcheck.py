"""Analytic-vs-numeric gradient verification on small models."""

from __future__ import annotations

import numpy as np

from ..errors import ContractError
from .model import CnnModel, images_to_tensor
from .training import cross_entropy

MAX_PARAMS = 10_000
MAX_BATCH = 8


def gradient_check(
    model: CnnModel,
    batch: tuple[np.ndarray, np.ndarray],
    n_samples: int = 200,
    step: float = 1e-5,
    seed: int = 0,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    Runs on a float64 copy of the model with dropout disabled, over a
    random subsample of the trainable (unfrozen) parameters. Frozen
    layers report exactly-zero analytic gradients and are not perturbed.
    """
    if model.n_parameters > MAX_PARAMS:
        raise ContractError(
            f"gradient check is limited to {MAX_PARAMS} parameters, "
            f"model has {model.n_parameters}"
        )
    x, y = batch
    if len(x) > MAX_BATCH:
        raise ContractError(f"gradient check batch limited to {MAX_BATCH} images")

    m64 = model.astype(np.float64)
    xb = images_to_tensor(x, np.float64)
    yb = np.asarray(y, dtype=np.int64)

    logits = m64.forward_logits(xb, training=False)
    _, dlogits = cross_entropy(logits, yb)
    m64.backward(dlogits)
    analytic = [dict(layer.grads) for layer in m64.layers]

    coords = []
    for li, layer in enumerate(m64.layers):
        if not layer.params or layer.frozen:
            continue
        for name, p in layer.params.items():
            coords.extend((li, name, k) for k in range(p.size))
    rng = np.random.Generator(np.random.PCG64(seed))
    if len(coords) > n_samples:
        pick = rng.choice(len(coords), size=n_samples, replace=False)
        coords = [coords[int(i)] for i in pick]

    def loss_at() -> float:
        out = m64.forward_logits(xb, training=False)
        l, _ = cross_entropy(out, yb)
        return l

    max_rel = 0.0
    for li, name, k in coords:
        p = m64.layers[li].params[name]
        flat = p.reshape(-1)
        orig = flat[k]
        flat[k] = orig + step
        plus = loss_at()
        flat[k] = orig - step
        minus = loss_at()
        flat[k] = orig
        numeric = (plus - minus) / (2.0 * step)
        a = float(analytic[li][name].reshape(-1)[k])
        denom = max(abs(a) + abs(numeric), 1e-10)
        rel = abs(a - numeric) / denom
        max_rel = max(max_rel, rel)
    return max_rel
