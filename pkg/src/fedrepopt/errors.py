"""Exception types shared across the package."""


class FedRepOptError(Exception):
    """Base class for all package errors."""


class ShapeError(FedRepOptError):
    """Tensor shapes are incompatible for the requested operation."""


class NumericalError(FedRepOptError):
    """A NaN/Inf value or a diverging computation was detected."""


class ConfigError(FedRepOptError):
    """Invalid run configuration (bad flag, missing file, bad preset)."""


class CheckpointError(FedRepOptError):
    """Checkpoint file is malformed (magic, CRC, duplicate ids, truncation)."""


class AggregationError(FedRepOptError):
    """A federated round could not be aggregated (e.g. every client failed)."""
