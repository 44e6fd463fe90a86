"""Exception types shared across the package."""


class TATrackError(Exception):
    pass


class DimensionError(TATrackError, ValueError):
    """Shapes or axes that do not line up."""


class UsageError(TATrackError, RuntimeError):
    pass


class NumericError(TATrackError, FloatingPointError):
    """An op produced NaN or Inf."""


class ConfigError(TATrackError, ValueError):
    pass


class InputError(TATrackError, ValueError):
    """Invalid boxes, sequences or other user-supplied data."""


class LoadError(TATrackError, IOError):
    pass
