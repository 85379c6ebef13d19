"""Exception hierarchy used across the package."""


class WeedNetError(Exception):
    """Base class for every error raised by weednet."""


class ShapeError(WeedNetError, ValueError):
    pass


class InputError(WeedNetError, ValueError):
    pass


class ConfigError(WeedNetError, ValueError):
    pass


class StateError(WeedNetError, RuntimeError):
    """An operation was called in the wrong order (e.g. backward before forward)."""


class DatasetError(WeedNetError):
    pass


class DecodeError(WeedNetError):
    def __init__(self, path, reason):
        super().__init__(f"cannot decode image {path!s}: {reason}")
        self.path = path


class FormatError(WeedNetError):
    """Checkpoint magic or version does not match."""


class CorruptionError(WeedNetError):
    """Checkpoint payload is truncated or has the wrong length."""


class DivergenceError(WeedNetError, FloatingPointError):
    def __init__(self, epoch, step, value):
        super().__init__(f"non-finite loss {value!r} at epoch {epoch}, step {step}")
        self.epoch = epoch
        self.step = step
