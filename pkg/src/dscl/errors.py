"""Exception hierarchy shared across the package.

Exit-code mapping used by the CLI lives in `cli.py`; everything here is a
plain exception type so library callers can catch precisely.
"""


class DsclError(Exception):
    """Base class for all package errors."""


class DimensionError(DsclError):
    """Shape/dimension mismatch between operands."""


class ParameterError(DsclError):
    """Invalid hyperparameter or argument value."""


class NumericError(DsclError):
    """Non-finite value produced, or a numeric-domain violation."""


class DegenerateVectorError(NumericError):
    """Vector with (near-)zero norm where a unit direction is required."""


class LabelError(DsclError):
    """Class label outside the valid range."""


class BatchConstructionError(DsclError):
    """Batch violates the anchor/positive structure needed by a loss."""


class DegenerateBatchError(BatchConstructionError):
    """Batch so small a loss denominator would be an empty sum."""


class DatasetError(DsclError):
    """Dataset-level problem (empty class, too small for a split, ...)."""


class IngestionError(DatasetError):
    """A specific file could not be read as image data."""


class CorruptCheckpointError(DsclError):
    """Checkpoint file failed magic/shape/length validation."""


class ContractViolationError(DsclError):
    """A frozen/discard contract was broken (e.g. extractor mutated)."""


class EvaluationError(DsclError):
    """Metric undefined for the given inputs."""


class UndefinedKappaError(EvaluationError):
    """Cohen's kappa undefined (expected agreement equals 1)."""


class ConfigError(DsclError):
    """Run configuration invalid (unknown key, bad value, bad combination)."""
