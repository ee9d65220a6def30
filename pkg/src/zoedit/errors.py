"""Exception taxonomy shared across the package."""


class ZoeditError(Exception):
    """Base class for all package errors."""


class ConfigurationError(ZoeditError):
    """Shape mismatch, missing tensor/scale, or otherwise invalid setup."""


class InputError(ZoeditError):
    """Caller-supplied data violates a precondition (bad token, empty corpus...)."""


class CacheInvalidError(ZoeditError):
    """A prefix cache was reused with tokens it was not built for."""


class NumericError(ZoeditError):
    """Non-finite value encountered where finiteness is contractual."""

    def __init__(self, msg, layer=None):
        super().__init__(msg)
        self.layer = layer


class FormatError(ZoeditError):
    """Checkpoint container is malformed (magic, version, truncation)."""


class DatasetError(ZoeditError):
    """JSONL dataset failed schema validation; message lists line numbers."""


class DegenerateKeyError(ZoeditError):
    """Rank-one update denominator vanished; key is (near-)null under C^{-1}."""


class SingularCovarianceError(ZoeditError):
    """Covariance cannot be inverted: too few samples and no ridge."""


class DivergenceError(ZoeditError):
    """Value optimization blew up; carries the loss trace collected so far."""

    def __init__(self, msg, trace=None):
        super().__init__(msg)
        self.trace = trace or []


class TrainingFailure(ZoeditError):
    """Reference trainer made no progress over its full budget."""

    def __init__(self, msg, report=None):
        super().__init__(msg)
        self.report = report


class EditFailure(ZoeditError):
    """An edit stage failed; `.report` holds the partial EditReport."""

    def __init__(self, msg, report=None):
        super().__init__(msg)
        self.report = report
