class ConfigError(ValueError):
    """Raised for inconsistent configuration or input shapes."""


class NumericError(FloatingPointError):
    """Raised when activations or losses turn non-finite."""


class PartitionError(ValueError):
    """Raised for an invalid part count (e.g. more parts than patches)."""


class AggregationError(ValueError):
    """Raised when an attention row sums to zero."""


class DatasetError(RuntimeError):
    pass


class CheckpointError(RuntimeError):
    pass
