class ShapeError(ValueError):
    """Tensor shapes are incompatible with the requested operation."""


class ConfigError(ValueError):
    """A configuration value violates a documented constraint."""


class StateError(RuntimeError):
    """An op was asked for gradients before its forward pass ran."""


class CorruptionError(IOError):
    """On-disk data does not match what its manifest promises."""
