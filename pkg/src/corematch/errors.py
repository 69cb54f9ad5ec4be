"""Exception hierarchy shared by every module.

Each class maps onto one CLI exit code (see ``corematch.cli``).
"""

from __future__ import annotations


class CoreMatchError(Exception):
    """Base class for all library errors."""

    exit_code = 5


class InvalidParam(CoreMatchError, ValueError):
    exit_code = 3


class ShapeError(InvalidParam):
    pass


class EmptySet(InvalidParam):
    pass


class ZeroVector(InvalidParam):
    pass


class VocabError(InvalidParam):
    pass


class SequenceOverflow(InvalidParam):
    pass


class TooFewPoints(InvalidParam):
    pass


class DegenerateDistribution(CoreMatchError):
    """All counts equal: no knee exists; callers keep every token."""


class DegenerateMatrix(CoreMatchError):
    pass


class NumericError(CoreMatchError, ArithmeticError):
    """A public operation produced NaN or Inf."""


class WeightFileError(CoreMatchError):
    exit_code = 4


class ChecksumError(WeightFileError):
    pass


class VersionError(WeightFileError):
    pass


class TruncatedFile(WeightFileError):
    pass
