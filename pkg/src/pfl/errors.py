"""Exception types shared across the package."""


class PFLError(Exception):
    """Base class for all package errors."""


class ShapeError(PFLError, ValueError):
    pass


class NumericError(PFLError, ArithmeticError):
    pass


class InputError(PFLError, ValueError):
    pass


class ConfigError(PFLError, ValueError):
    pass


class SamplingError(PFLError, ValueError):
    pass


class ParseError(PFLError, ValueError):
    pass


class CheckpointError(PFLError, ValueError):
    pass


class AnalysisError(PFLError, ValueError):
    pass
