"""Exception hierarchy shared across the package."""


class DmibError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(DmibError, ValueError):
    pass


class ParameterError(DmibError, ValueError):
    pass


class DataError(DmibError, ValueError):
    pass


class ConfigurationError(DmibError, ValueError):
    pass


class UsageError(DmibError, RuntimeError):
    pass


class PreconditionError(DmibError, ValueError):
    pass


class TrainingError(DmibError, RuntimeError):
    pass
