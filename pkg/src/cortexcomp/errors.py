"""Exception hierarchy. Each family maps to a distinct CLI exit code."""


class CortexCompError(Exception):
    exit_code = 1


class InvalidConfig(CortexCompError, ValueError):
    exit_code = 2


class UnknownAblation(InvalidConfig):
    pass


class InvalidCounts(InvalidConfig):
    pass


class InvalidPolicy(InvalidConfig):
    pass


class ArtifactMissing(CortexCompError, FileNotFoundError):
    exit_code = 3


class DivergenceDetected(CortexCompError, FloatingPointError):
    exit_code = 4


class FingerprintMismatch(CortexCompError):
    exit_code = 5


class TooFewSamples(CortexCompError, ValueError):
    exit_code = 6


class NoPairAvailable(TooFewSamples):
    pass


class EmptyInput(TooFewSamples):
    pass


class EmptyBank(EmptyInput):
    pass


class EmptySubjectSet(EmptyInput):
    pass


class InsufficientLabels(TooFewSamples):
    pass


class DegenerateInput(CortexCompError, ValueError):
    exit_code = 6


class MissingStats(CortexCompError, KeyError):
    exit_code = 6


class ShapeMismatch(CortexCompError, ValueError):
    exit_code = 7


class IndexOutOfRange(CortexCompError, IndexError):
    exit_code = 7


class NonFiniteGradient(CortexCompError, FloatingPointError):
    exit_code = 4
