"""Particle-swarm optimizer over mixed continuous/integer spaces.

The velocity update is the literal two-term attraction rule

    v := v + U(0, phi1) * (pbest - x) + U(0, phi2) * (gbest - x)

with no inertia term by default (an inertia weight is available but off).
Velocities are clamped per dimension to half the search range, and
positions reflect off the bounds with a velocity sign flip. Scores are
maximized.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Sequence

import numpy as np

from .errors import ConfigError, ContractError

DEFAULT_PHI = 1.49618

CONTINUOUS = "continuous"
INTEGER = "integer"


@dataclass(frozen=True)
class Dim:
    name: str
    kind: str
    lower: float
    upper: float

    def __post_init__(self):
        if self.kind not in (CONTINUOUS, INTEGER):
            raise ConfigError(f"dim {self.name!r}: unknown kind {self.kind!r}")
        if not self.lower < self.upper:
            raise ConfigError(f"dim {self.name!r}: lower {self.lower} >= upper {self.upper}")
        if self.kind == INTEGER and (self.lower != int(self.lower) or self.upper != int(self.upper)):
            raise ConfigError(f"dim {self.name!r}: integer dims need integer bounds")


@dataclass(frozen=True)
class SearchSpace:
    dims: tuple[Dim, ...]

    def __post_init__(self):
        if not self.dims:
            raise ConfigError("search space has no dimensions")

    @property
    def n_dims(self) -> int:
        return len(self.dims)

    @property
    def lower(self) -> np.ndarray:
        return np.asarray([d.lower for d in self.dims], dtype=np.float64)

    @property
    def upper(self) -> np.ndarray:
        return np.asarray([d.upper for d in self.dims], dtype=np.float64)


class Particle(NamedTuple):
    position: np.ndarray
    velocity: np.ndarray
    best_position: np.ndarray
    best_score: float


@dataclass
class Swarm:
    space: SearchSpace
    positions: np.ndarray       # (n, d)
    velocities: np.ndarray      # (n, d)
    pbest_positions: np.ndarray
    pbest_scores: np.ndarray    # (n,), -inf before first evaluation
    gbest_position: np.ndarray
    gbest_score: float
    phi1: float
    phi2: float
    v_max: np.ndarray           # (d,)
    rng: np.random.Generator
    inertia: float = 1.0        # literal update; < 1 only when explicitly enabled

    @property
    def size(self) -> int:
        return int(self.positions.shape[0])

    @property
    def particles(self) -> list[Particle]:
        return [
            Particle(self.positions[i].copy(), self.velocities[i].copy(),
                     self.pbest_positions[i].copy(), float(self.pbest_scores[i]))
            for i in range(self.size)
        ]


def init_swarm(
    space: SearchSpace,
    size: int,
    seed: int,
    phi1: float = DEFAULT_PHI,
    phi2: float = DEFAULT_PHI,
    inertia: float = 1.0,
) -> Swarm:
    """Uniform random positions within bounds; velocities in [-v_max, v_max]."""
    if size < 2:
        raise ConfigError(f"swarm size must be >= 2, got {size}")
    rng = np.random.Generator(np.random.PCG64(seed))
    lo, hi = space.lower, space.upper
    v_max = (hi - lo) / 2.0
    positions = rng.uniform(lo, hi, size=(size, space.n_dims))
    velocities = rng.uniform(-v_max, v_max, size=(size, space.n_dims))
    return Swarm(
        space=space,
        positions=positions,
        velocities=velocities,
        pbest_positions=positions.copy(),
        pbest_scores=np.full(size, -np.inf),
        gbest_position=positions[0].copy(),
        gbest_score=-np.inf,
        phi1=phi1,
        phi2=phi2,
        v_max=v_max,
        rng=rng,
        inertia=inertia,
    )


def step(swarm: Swarm, scores: Sequence[float]) -> Swarm:
    """One evaluate-and-move round: update bests, then apply the velocity rule."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.shape != (swarm.size,):
        raise ContractError(
            f"got {scores.shape[0] if scores.ndim else 0} scores for {swarm.size} particles"
        )

    improved = scores > swarm.pbest_scores
    swarm.pbest_scores[improved] = scores[improved]
    swarm.pbest_positions[improved] = swarm.positions[improved]
    best = int(np.argmax(swarm.pbest_scores))
    if swarm.pbest_scores[best] > swarm.gbest_score:
        swarm.gbest_score = float(swarm.pbest_scores[best])
        swarm.gbest_position = swarm.pbest_positions[best].copy()

    n, d = swarm.positions.shape
    u1 = swarm.rng.uniform(0.0, swarm.phi1, size=(n, d))
    u2 = swarm.rng.uniform(0.0, swarm.phi2, size=(n, d))
    v = (
        swarm.inertia * swarm.velocities
        + u1 * (swarm.pbest_positions - swarm.positions)
        + u2 * (swarm.gbest_position[None, :] - swarm.positions)
    )
    np.clip(v, -swarm.v_max, swarm.v_max, out=v)
    x = swarm.positions + v

    lo, hi = swarm.space.lower, swarm.space.upper
    for _ in range(64):  # bounded ranges make one pass almost always enough
        below = x < lo
        above = x > hi
        if not below.any() and not above.any():
            break
        x = np.where(below, 2.0 * lo - x, x)
        x = np.where(above, 2.0 * hi - x, x)
        flip = below | above
        v = np.where(flip, -v, v)
    np.clip(x, lo, hi, out=x)  # guard against floating residue at the edges

    swarm.velocities = v
    swarm.positions = x
    return swarm


def decode_position(space: SearchSpace, position: np.ndarray) -> dict[str, float | int]:
    """Continuous dims pass through; integer dims round half away from zero
    and clamp to their bounds."""
    position = np.asarray(position, dtype=np.float64)
    out: dict[str, float | int] = {}
    for d, value in zip(space.dims, position):
        if d.kind == INTEGER:
            rounded = int(np.floor(value + 0.5)) if value >= 0 else -int(np.floor(-value + 0.5))
            out[d.name] = int(min(max(rounded, d.lower), d.upper))
        else:
            out[d.name] = float(value)
    return out


@dataclass
class OptimizeTrace:
    best_scores: list[float] = field(default_factory=list)
    best_assignments: list[dict] = field(default_factory=list)


def optimize(
    space: SearchSpace,
    objective: Callable[[np.ndarray], float],
    swarm_size: int,
    iterations: int,
    seed: int,
    phi1: float = DEFAULT_PHI,
    phi2: float = DEFAULT_PHI,
    inertia: float = 1.0,
) -> tuple[dict, float, OptimizeTrace]:
    """Maximize ``objective`` over the space; returns the decoded best.

    Runs ``iterations`` evaluate/step rounds after initialization, so one
    iteration scores only the initial random sample. The per-iteration
    best-score trace is monotone non-decreasing by construction.
    """
    if iterations < 1:
        raise ConfigError("iterations must be >= 1")
    swarm = init_swarm(space, swarm_size, seed, phi1=phi1, phi2=phi2, inertia=inertia)
    trace = OptimizeTrace()
    for _ in range(iterations):
        scores = []
        for i in range(swarm.size):
            try:
                scores.append(float(objective(swarm.positions[i].copy())))
            except Exception as exc:
                assignment = decode_position(space, swarm.positions[i])
                raise RuntimeError(f"objective failed at {assignment}: {exc}") from exc
        step(swarm, scores)
        trace.best_scores.append(swarm.gbest_score)
        trace.best_assignments.append(decode_position(space, swarm.gbest_position))
    return (
        decode_position(space, swarm.gbest_position),
        swarm.gbest_score,
        trace,
    )


# ---------------------------------------------------------------------------
# Hyper-parameter search-space preset and reported optimal values
# ---------------------------------------------------------------------------

GENERAL_DIMS = (
    Dim("max_epochs", INTEGER, 5, 50),
    Dim("batch_size", INTEGER, 32, 128),
    Dim("early_stop_patience", INTEGER, 2, 5),
    Dim("learning_rate", CONTINUOUS, 0.001, 0.1),
    Dim("dropout_rate", CONTINUOUS, 0.2, 0.8),
)

OPTIMAL_HYPERPARAMS = {
    "max_epochs": 20,
    "batch_size": 128,
    "early_stop_patience": 3,
    "learning_rate": 0.003,
    "dropout_rate": 0.5,
}


def hyperparameter_space(frozen_layer_bounds: tuple[int, int] | None = None) -> SearchSpace:
    """The tuning space: five general dims plus a per-model frozen-layer dim."""
    dims = list(GENERAL_DIMS)
    if frozen_layer_bounds is not None:
        lo, hi = frozen_layer_bounds
        dims.append(Dim("frozen_layers", INTEGER, lo, hi))
    return SearchSpace(tuple(dims))


def save_search_space(space: SearchSpace, path) -> None:
    import json
    doc = {
        "version": 1,
        "dims": [
            {"name": d.name, "kind": d.kind, "lower": d.lower, "upper": d.upper}
            for d in space.dims
        ],
    }
    from pathlib import Path
    Path(path).write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")


def load_search_space(path) -> SearchSpace:
    import json
    from pathlib import Path
    raw = json.loads(Path(path).read_text(encoding="utf-8"))
    if raw.get("version") != 1:
        raise ConfigError(f"search space file version {raw.get('version')!r} != 1")
    return SearchSpace(tuple(
        Dim(d["name"], d["kind"], float(d["lower"]), float(d["upper"]))
        for d in raw["dims"]
    ))
