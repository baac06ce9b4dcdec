"""Error taxonomy shared by all modules.

The CLI maps each class to a categorized nonzero exit; library callers can
catch ``AcrodisError`` to handle everything this package raises on purpose.
"""


class AcrodisError(Exception):
    """Base class for all deliberate failures."""


class FormatError(AcrodisError, ValueError):
    """Input file does not parse as the expected on-disk format."""


class ValidationError(AcrodisError, ValueError):
    """Parsed data violates a documented invariant."""


class ParameterError(AcrodisError, ValueError):
    """A caller-supplied parameter is outside its legal range."""


class NumericalError(AcrodisError, ArithmeticError):
    """A non-finite value appeared where training must abort."""


class EmptyCorpusError(AcrodisError, ValueError):
    """An operation that needs corpus content received none."""
