"""Exception types shared across the package."""


class PortalmError(Exception):
    """Base class for all portalm errors."""


class ValidationError(PortalmError):
    """Input data violates a structural contract (schema, ranges, uniqueness)."""


class CorpusFormatError(ValidationError):
    """A corpus file could not be parsed; message names the offending line."""


class DegenerateInputError(PortalmError):
    """Input is structurally valid but unusable (e.g. all responses empty)."""


class MetricUndefinedError(PortalmError):
    """A metric's preconditions do not hold (e.g. single-class AUC)."""


class TrainingDivergedError(PortalmError):
    """Training produced a non-finite loss; message carries diagnostics."""


class VocabularyMismatchError(PortalmError):
    """Model parameters and vocabulary do not agree and were not reconciled."""


class ConfigError(PortalmError):
    """Run configuration is missing or malformed; message names the field."""
