"""Exception types shared across the package.

Each class maps to a distinct process exit code in the command line front
end, so callers can tell a malformed input file from a failed calibration.
"""
from __future__ import annotations


class LvhwError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class InputDataError(LvhwError, ValueError):
    """A market data file or a constructor argument is malformed."""

    exit_code = 3


class OutOfRangeError(LvhwError, ValueError):
    """A query falls outside the range an object can answer for."""

    exit_code = 4


class ConfigurationError(LvhwError, ValueError):
    """Simulation or run configuration is inconsistent."""

    exit_code = 5


class CoverageError(LvhwError, ValueError):
    """A local volatility surface does not cover the simulation horizon."""

    exit_code = 6


class ArbitrageError(LvhwError, ValueError):
    """The smile implies a non-positive density at a calibration node."""

    exit_code = 7

    def __init__(self, message: str, K: float | None = None, T: float | None = None):
        super().__init__(message)
        self.K = K
        self.T = T


class CalibrationError(LvhwError, ValueError):
    """A local volatility node could not be computed."""

    exit_code = 8

    def __init__(self, message: str, K: float | None = None, T: float | None = None,
                 radicand: float | None = None, slice_index: int | None = None):
        super().__init__(message)
        self.K = K
        self.T = T
        self.radicand = radicand
        self.slice_index = slice_index


class SparseDataError(LvhwError, ValueError):
    """Too few simulated paths near the conditioning point."""

    exit_code = 9
