"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operands have incompatible shapes."""


class InvalidShapeError(ValueError):
    """A shape list is empty or contains a non-positive extent."""


class InvalidAxisError(ValueError):
    pass


class GeometryError(ValueError):
    """Kernel/stride/padding combination does not fit the input."""


class ConfigError(ValueError):
    pass


class WeightFormatError(ValueError):
    """A weight container is truncated, corrupt or of an unknown version."""


class IncompatibleWeightsError(ValueError):
    """A weight container does not fit the model it is loaded into."""


class DecodeError(OSError):
    pass


class SplitError(ValueError):
    pass


class LabelError(ValueError):
    pass


class CheckpointError(OSError):
    """Writing a checkpoint failed; ``log`` holds the run so far."""

    def __init__(self, message, log=None):
        super().__init__(message)
        self.log = log
