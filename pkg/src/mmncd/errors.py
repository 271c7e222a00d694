"""Exception types shared across the package.

The CLI maps these onto process exit codes, so new failure modes should
reuse an existing class where the meaning fits.
"""


class ShapeError(ValueError):
    """Tensor or array dimensions do not line up."""


class ConfigError(ValueError):
    """A configuration value is missing, unknown, or out of range."""


class DegenerateVectorError(ValueError):
    """A vector with (near-)zero norm reached a cosine computation."""


class DataFormatError(ValueError):
    """A dataset, checkpoint, or embeddings file failed to parse."""


class CheckpointMismatchError(ValueError):
    """A checkpoint does not match the model or config it is loaded into."""


class CalibrationError(RuntimeError):
    """Clustering hyperparameter search found no usable configuration."""


class NumericalError(RuntimeError):
    """A computation produced non-finite values; the run must abort."""


class ProtocolError(ValueError):
    """A retrieval run violates a metric's preconditions (e.g. a query with
    no relevant targets)."""
