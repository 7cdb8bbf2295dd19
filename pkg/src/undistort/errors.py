"""Exception hierarchy shared across the package.

Every error carries an ``exit_code`` used by the command line front end:
usage errors exit 1, input/validation errors exit 2, numerical failures
exit 3.  Library code raises these directly; only the CLI turns them into
process exits.
"""

from __future__ import annotations


class UndistortError(Exception):
    """Base class for all package errors."""

    exit_code = 2


class UsageError(UndistortError):
    """Bad command line invocation."""

    exit_code = 1


class InputError(UndistortError):
    """Invalid or inconsistent input data (exit code 2)."""


class ParseError(InputError):
    """A file could not be parsed.

    Attributes:
        offset: Byte offset of the first offending byte, or None when the
            failure is not tied to a specific position.
    """

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ConfigError(InputError):
    """Invalid configuration file or unknown configuration key."""


class MissingInput(InputError):
    """A required input (e.g. a depth map) was not supplied."""


class DimensionMismatch(InputError):
    """Arrays that must agree in shape do not."""


class InvalidDimensions(InputError):
    """A requested size is outside the supported range."""


class MissingLabels(InputError):
    """A semantic landmark label required by an operation is absent."""


class NumericalError(UndistortError):
    """Numerical failure during optimization or rendering (exit code 3)."""

    exit_code = 3


class PointBehindCamera(NumericalError):
    """A point to be projected lies at or behind the near plane."""

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class InfeasibleRender(NumericalError):
    """Rendering the current state failed (e.g. geometry behind camera)."""


class DegenerateDistance(NumericalError):
    """The distance/focal coupling left its valid range."""


class NonPositiveFocal(NumericalError):
    """The effective focal length is not positive."""


class NonFiniteGradient(NumericalError):
    """The objective gradient contains NaN or infinity."""


class InitializationFailed(NumericalError):
    """Rigid alignment could not produce a usable starting camera."""


class InsufficientOverlap(NumericalError):
    """Too few valid pixels shared between two depth maps."""


class DegenerateControlPoints(NumericalError):
    """Too few (or collinear) control points for warp estimation."""


class DegenerateConfiguration(NumericalError):
    """A point configuration does not determine the requested transform."""
