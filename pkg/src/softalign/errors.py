"""Exception hierarchy shared by all modules."""


class SoftAlignError(Exception):
    """Base class; the CLI maps any subclass to a nonzero exit code."""


class InvalidArgumentError(SoftAlignError, ValueError):
    pass


class ShapeError(SoftAlignError, ValueError):
    pass


class FormatError(SoftAlignError, ValueError):
    pass


class ConfigError(SoftAlignError, ValueError):
    pass


class DataIOError(SoftAlignError, OSError):
    pass
