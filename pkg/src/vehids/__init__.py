"""Vehicular-network intrusion detection via traffic-to-image CNNs.

Pipeline: parse or synthesize traffic records, quantile-normalize them to
pixel intensities, stack consecutive records into square color images,
train compact CNN classifiers (optionally PSO-tuned), and combine the
best ones by confidence averaging or dense-feature concatenation.
"""

__version__ = "0.1.0"

from . import artifacts, cnn, ensemble, evaluation, ingest, pipeline, pso, transform
from .errors import (
    ArtifactError,
    ConfigError,
    ContractError,
    DataError,
    NumericError,
    VehidsError,
)

__all__ = [
    "ArtifactError",
    "ConfigError",
    "ContractError",
    "DataError",
    "NumericError",
    "VehidsError",
    "artifacts",
    "cnn",
    "ensemble",
    "evaluation",
    "ingest",
    "pipeline",
    "pso",
    "transform",
    "__version__",
]
