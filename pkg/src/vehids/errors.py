"""Exception hierarchy.

Three families map onto the CLI exit codes: ConfigError -> 1,
DataError -> 2, NumericError -> 3.
"""


class VehidsError(Exception):
    """Base class for all package errors."""


class ConfigError(VehidsError):
    """Invalid configuration, search space, or usage."""


class DataError(VehidsError):
    """Malformed or inconsistent input data."""


class ParseError(DataError):
    """Row-level parse failure; carries the 1-based line number."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class SchemaError(DataError):
    """Input does not match the declared dataset schema."""


class LabelingError(DataError):
    """A label value cannot be mapped to a known class."""


class FitError(DataError):
    """Statistics cannot be fitted from the given sample."""


class ShapeError(DataError):
    """Array or vector shape does not match the expected geometry."""


class ContractError(VehidsError):
    """A caller-side precondition was violated."""


class StructureError(VehidsError):
    """Model structure does not support the requested operation."""


class NumericError(VehidsError):
    """Non-finite values or numeric divergence."""


class TrainingError(VehidsError):
    """Training cannot proceed (e.g. empty training set)."""


class ArtifactError(VehidsError):
    """Artifact container problems."""


class CorruptArtifactError(ArtifactError):
    """Artifact failed hash or framing verification."""


class ArtifactVersionError(ArtifactError):
    """Artifact was written by an incompatible format version."""
