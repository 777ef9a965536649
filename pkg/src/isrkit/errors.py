"""Exception hierarchy shared by all isrkit modules."""


class IsrError(ValueError):
    """Base class for every error raised by isrkit."""


class InvalidMatrix(IsrError):
    pass


class DimensionMismatch(IsrError):
    pass


class EmptyInput(IsrError):
    pass


class EmptyClass(IsrError):
    pass


class InsufficientSamples(IsrError):
    pass


class Unsupported(IsrError):
    pass


class TooFewEnvironments(IsrError):
    pass


class DegenerateEnvironments(IsrError):
    pass


class InsufficientVariance(IsrError):
    pass


class InvalidParameter(IsrError):
    pass


class DegenerateLabels(IsrError):
    pass


class InvalidSpec(IsrError):
    pass


class ConfigError(IsrError):
    pass


class ParseError(IsrError):
    pass
