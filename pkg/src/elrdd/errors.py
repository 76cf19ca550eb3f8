"""Exception hierarchy shared by the library and the command-line front end."""


class ELRDDError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class InputError(ELRDDError, ValueError):
    """Malformed user input: bad column types, non-finite values, bad options."""

    exit_code = 2


class DataSupportError(InputError):
    """Too few observations to support the requested computation."""

    exit_code = 2


class NumericalError(ELRDDError, ArithmeticError):
    """A numerical routine failed to converge or met a singular system."""

    exit_code = 3


class DegenerateDesignError(NumericalError):
    """All curvature constants vanish, so no bandwidth can be selected."""

    exit_code = 3
