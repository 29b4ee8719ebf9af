"""Exception hierarchy shared across the package.

CLI exit codes: ConfigError -> 2, DataError -> 3, NumericError -> 4.
"""


class TcrlabError(Exception):
    """Base class for all package errors."""


class ShapeError(TcrlabError):
    """Tensor dimension mismatch; message names the offending shapes."""


class ConfigError(TcrlabError):
    """Invalid configuration, architecture spec, or wiring."""


class DataError(TcrlabError):
    """Ingestion, sampling, or splitting failure."""


class InferenceError(TcrlabError):
    """A model was asked to run on incompatible inputs."""


class ExplanationError(TcrlabError):
    """Requested attention direction is not available."""


class SelectionError(TcrlabError):
    """Checkpoint selection had no eligible ledger rows."""


class MetricError(TcrlabError):
    """A metric is undefined for the given inputs (e.g. single-class AUC)."""


class NumericError(TcrlabError):
    """Non-finite values encountered during training."""
