"""Exception hierarchy.

``DataError`` covers malformed or insufficient input, ``NumericError`` covers
failures of the arithmetic itself. The CLI maps them to exit codes 2 and 3.
"""


class SteinError(Exception):
    pass


class DataError(SteinError, ValueError):
    pass


class NumericError(SteinError, ArithmeticError):
    pass


class DimMismatch(DataError):
    pass


class TooFewSamples(DataError):
    pass


class DegenerateData(DataError):
    pass


class LabelOutOfRange(DataError):
    pass


class MissingLabels(DataError):
    pass


class EmptyDataset(DataError):
    pass


class UnsupportedVariant(DataError):
    pass


class OracleUnavailable(DataError):
    pass


class TapeReuse(SteinError, RuntimeError):
    pass


class NotSpd(NumericError):
    pass


class NoConverge(NumericError):
    pass


class NonFiniteEval(NumericError):
    pass


class NonFiniteActivation(NumericError):
    pass


class NonFiniteLoss(NumericError):
    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
