"""Exception hierarchy shared by all kernseg modules."""


class KernsegError(Exception):
    """Base class for all kernseg errors."""


class InputError(KernsegError, ValueError):
    """Malformed runtime input: wrong shape, non-finite values, bad labels."""


class ConfigError(KernsegError, ValueError):
    """Invalid hyper-parameter or configuration value."""


class NumericalError(KernsegError, RuntimeError):
    """A linear-algebra routine failed (singular system, Cholesky breakdown)."""


class DatasetError(KernsegError, RuntimeError):
    """A feature store could not be read, written, or validated."""
