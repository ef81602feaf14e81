"""Exception types raised across the package."""


class PsroTspError(Exception):
    pass


class InvalidScale(PsroTspError, ValueError):
    pass


class InvalidParameter(PsroTspError, ValueError):
    pass


class DegenerateInstance(PsroTspError, ValueError):
    pass


class SizeMismatch(PsroTspError, ValueError):
    pass


class UnsupportedFormat(PsroTspError, ValueError):
    pass


class MalformedFile(PsroTspError, ValueError):
    pass


class TooLarge(PsroTspError, ValueError):
    pass


class InvalidOracleValue(PsroTspError, ValueError):
    pass


class ShapeError(PsroTspError, ValueError):
    pass


class InvalidCandidate(PsroTspError, ValueError):
    pass


class StateExhausted(PsroTspError, ValueError):
    pass


class EmptyPopulation(PsroTspError, ValueError):
    pass


class InvalidWeights(PsroTspError, ValueError):
    pass


class InvalidExpansion(PsroTspError, ValueError):
    pass


class SolveError(PsroTspError, RuntimeError):
    pass


class IncompleteCheckpoint(PsroTspError, ValueError):
    pass
