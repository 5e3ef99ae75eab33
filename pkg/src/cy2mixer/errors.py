"""Exception hierarchy.

Every error carries the CLI exit code it maps to: 1 usage, 2 data, 3 numeric.
"""


class Cy2MixerError(Exception):
    exit_code = 2


# graph topology
class GraphError(Cy2MixerError, ValueError):
    pass


class IndexOutOfRange(GraphError):
    pass


class SelfLoop(GraphError):
    pass


class DuplicateEdge(GraphError):
    pass


class BasisGraphMismatch(GraphError):
    pass


class InvalidSteps(GraphError):
    pass


class UnknownEdge(GraphError):
    pass


class InvalidSigma(GraphError):
    pass


# structural encodings
class EncodingError(Cy2MixerError, ValueError):
    pass


class EmptySequence(EncodingError):
    pass


class FeatureOutOfRange(EncodingError):
    pass


class TopKTooLarge(EncodingError):
    pass


class KTooLarge(EncodingError):
    pass


class InsufficientSpectrum(EncodingError):
    pass


# autodiff / model
class ShapeMismatch(Cy2MixerError, ValueError):
    pass


class OddChannels(ShapeMismatch):
    pass


class NonScalarLoss(Cy2MixerError, ValueError):
    pass


class TapeConsumed(Cy2MixerError, RuntimeError):
    pass


class CalendarIndexOutOfRange(Cy2MixerError, IndexError):
    pass


class AdjacencyKindMismatch(Cy2MixerError, ValueError):
    pass


# data pipeline
class DataError(Cy2MixerError, ValueError):
    pass


class ParseError(DataError):
    pass


class ShapeInconsistent(DataError):
    pass


class BadInterval(DataError):
    pass


class SplitTooSmall(DataError):
    pass


class InvalidSpec(DataError):
    pass


# training
class ConfigError(Cy2MixerError, ValueError):
    exit_code = 1


class ConfigMismatch(Cy2MixerError, ValueError):
    pass


class NonFiniteLoss(Cy2MixerError, ArithmeticError):
    exit_code = 3
