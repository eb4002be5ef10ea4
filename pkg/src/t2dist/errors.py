"""Exception hierarchy shared across the package.

Each error maps to a CLI exit code (see :mod:`t2dist.cli`).
"""


class T2DistError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ParameterError(T2DistError, ValueError):
    """Invalid argument, shape mismatch or inconsistent configuration."""

    exit_code = 2


class DegenerateInputError(ParameterError):
    """Input is well-formed but carries no usable information (e.g. zero first echo)."""


class ConvergenceError(T2DistError, ArithmeticError):
    """Iterative solver hit its iteration cap, or a loss became non-finite."""

    exit_code = 3


class ContainerError(T2DistError, OSError):
    """On-disk container is unreadable, corrupted or has an unknown version."""

    exit_code = 4
