"""Exception hierarchy shared by the library and the command line."""


class RUQuantError(Exception):
    """Base class for every error raised by :mod:`ruquant`."""


class InputError(RUQuantError, ValueError):
    """Invalid argument, shape mismatch or contract violation by the caller."""


class LoadError(InputError):
    """A tensor file could not be decoded."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} at offset {offset}"
        super().__init__(message)
        self.offset = offset


class NumericError(RUQuantError, ArithmeticError):
    """A computation produced non-finite values or diverged."""
