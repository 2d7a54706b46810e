"""Exception hierarchy.

Errors split into two families so callers (and the command line) can tell a
bad input apart from a numerical failure: :class:`DataError` for malformed or
out-of-range data, :class:`NumericError` for non-finite values and diverging
computations.
"""


class CycloneError(Exception):
    """Base class for every error raised by the package."""


class DataError(CycloneError, ValueError):
    pass


class NumericError(CycloneError, ArithmeticError):
    pass


class OutOfBounds(DataError):
    pass


class OutOfWindow(DataError):
    pass


class OutOfSpan(DataError):
    pass


class MissingVariable(DataError, KeyError):
    def __str__(self):
        return Exception.__str__(self)


class UnknownVariable(DataError):
    pass


class FormatError(DataError):
    """A binary container could not be decoded.

    ``offset`` is the byte position at which decoding failed.
    """

    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class BadMagic(FormatError):
    pass


class DimMismatch(FormatError):
    pass


class TruncatedPayload(FormatError):
    pass


class ParseError(DataError):
    def __init__(self, message, row):
        super().__init__(f"row {row}: {message}")
        self.row = row


class DuplicateFix(DataError):
    pass


class EmptyHistory(DataError):
    pass


class PlausibilityViolation(DataError):
    pass


class SpecMismatch(DataError):
    pass


class ShapeMismatch(DataError):
    pass


class IndivisibleWindow(DataError):
    pass


class IndivisibleFactor(DataError):
    pass


class RegionTooLarge(DataError):
    def __init__(self, extent, limit):
        super().__init__(
            f"region extent {extent:.6g} deg is not smaller than limit {limit:.6g} deg"
        )
        self.extent = extent
        self.limit = limit


class CoverageMismatch(DataError):
    pass


class EmptySet(DataError):
    pass


class InvalidCoordinate(DataError):
    pass


class FlatField(NumericError):
    pass


class EmptySupport(NumericError):
    pass


class NonFiniteInput(NumericError):
    pass


class NonFiniteActivation(NumericError):
    pass


class DivergedTraining(NumericError):
    pass


class DegenerateFit(NumericError):
    pass
