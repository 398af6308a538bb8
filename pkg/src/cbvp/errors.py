"""Exception hierarchy shared across the package."""

from __future__ import annotations


class CbvpError(Exception):
    """Base class for all package errors."""


class SingularityError(CbvpError):
    """State is too close to one of the primaries for the dynamics to be evaluated."""


class StepLimitError(CbvpError):
    """The adaptive integrator exceeded its step budget or underflowed its step size."""


class DomainError(CbvpError):
    """An argument lies outside the mathematical domain of the operation."""


class NoSolutionError(CbvpError):
    """A search completed without any candidate satisfying its acceptance condition."""


class EmptySplitError(CbvpError):
    """A requested dataset split would contain zero samples."""


class TooShortError(CbvpError):
    """A time series is too short to produce a single training window."""


class ShapeError(CbvpError):
    """Tensor or array shapes are incompatible with the requested operation."""


class NonFiniteError(CbvpError):
    """A NaN or infinity appeared where finite values are required."""


class LengthMismatchError(CbvpError):
    """Two series that must align have different lengths or sampling intervals."""


class InsufficientDataError(CbvpError):
    """Not enough series to compute the requested ensemble statistic."""


class ConfigError(CbvpError):
    """A configuration document failed schema validation."""
