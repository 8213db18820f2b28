"""Exception types shared across the package."""


class CoxCnnError(Exception):
    """Base class for all package errors."""


class InvalidArgumentError(CoxCnnError, ValueError):
    """Bad shapes, out-of-range values or inconsistent configuration."""


class NoEventsError(CoxCnnError, ValueError):
    """The partial likelihood is undefined without at least one observed event."""


class NoComparablePairsError(CoxCnnError, ValueError):
    """No usable pair exists for the concordance index."""


class FormatError(CoxCnnError):
    """A file does not follow the expected binary or JSON layout."""


class CorruptionError(FormatError):
    """A file exists but its content does not match the recorded checksum."""


class TrainingDivergedError(CoxCnnError, ArithmeticError):
    """Loss or gradient became non-finite during optimisation."""


class IllConditionedError(CoxCnnError, ArithmeticError):
    """Newton system could not be solved even after ridge regularisation."""
