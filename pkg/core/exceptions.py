"""
Pipeline exceptions.

Every error the pipeline raises on purpose carries a message, a stable code,
the process exit code the CLI reports for it, and optional details.
"""

from django.core.exceptions import ValidationError


EXIT_OK = 0
EXIT_INVALID_CONFIG = 1
EXIT_MISSING_INPUT = 2
EXIT_NUMERICAL_FAILURE = 3


class PipelineException(Exception):
    """Base exception class for pipeline errors."""

    default_message = 'Pipeline error.'
    default_code = 'ERROR'
    exit_code = EXIT_INVALID_CONFIG

    def __init__(self, message=None, code=None, exit_code=None, details=None):
        self.message = message or self.default_message
        self.code = code or self.default_code
        if exit_code is not None:
            self.exit_code = exit_code
        self.details = details or {}
        super().__init__(self.message)

    def as_record(self):
        """Return the error as a plain dict for logs and reports."""
        return {
            'error': {
                'message': self.message,
                'code': self.code,
                'exit_code': self.exit_code,
                'details': self.details,
            }
        }


class ConfigurationError(PipelineException):
    """Invalid or unknown configuration."""

    default_message = 'Invalid configuration.'
    default_code = 'INVALID_CONFIG'
    exit_code = EXIT_INVALID_CONFIG


class MissingInputError(PipelineException):
    """A stage was asked to run before its inputs exist."""

    default_message = 'Required input is missing.'
    default_code = 'MISSING_INPUT'
    exit_code = EXIT_MISSING_INPUT


class DatasetFormatError(PipelineException):
    """Raised for malformed on-disk artifacts."""

    default_message = 'Malformed dataset file.'
    default_code = 'MALFORMED_HEADER'
    exit_code = EXIT_MISSING_INPUT

    BAD_MAGIC = 'BAD_MAGIC'
    VERSION_MISMATCH = 'VERSION_MISMATCH'
    TRUNCATED = 'TRUNCATED'
    MALFORMED_HEADER = 'MALFORMED_HEADER'
    MISSING_FRAME = 'MISSING_FRAME'
    LABEL_OVERFLOW = 'LABEL_OVERFLOW'


class SceneSpecError(PipelineException):
    """A scene spec cannot be synthesized."""

    default_message = 'Degenerate scene specification.'
    default_code = 'DEGENERATE_SCENE'


class GeometryError(PipelineException):
    """Invalid calibration or pose input."""

    default_message = 'Invalid geometry input.'
    default_code = 'INVALID_GEOMETRY'


class DegeneratePlaneError(PipelineException):
    """RANSAC found no non-collinear sample."""

    default_message = 'Degenerate plane.'
    default_code = 'DEGENERATE_PLANE'
    exit_code = EXIT_NUMERICAL_FAILURE


class UnknownSourceError(PipelineException):
    """No normalization statistics for a source id."""

    default_message = 'Unknown source id.'
    default_code = 'UNKNOWN_SOURCE'


class NumericalError(PipelineException):
    """Non-finite values or failed numerical checks."""

    default_message = 'Numerical failure.'
    default_code = 'NUMERICAL_FAILURE'
    exit_code = EXIT_NUMERICAL_FAILURE


class PoolingError(NumericalError):
    """A pooled vector cannot be normalized."""

    default_message = 'Pooled vector has zero norm.'
    default_code = 'ZERO_POOLED_VECTOR'


class LossError(PipelineException):
    """A loss cannot be evaluated on the given batch."""

    default_message = 'Loss cannot be computed.'
    default_code = 'LOSS_ERROR'
    exit_code = EXIT_NUMERICAL_FAILURE

    EMPTY_BATCH = 'EMPTY_BATCH'
    ROW_MISMATCH = 'ROW_MISMATCH'
    NO_TEMPORAL_OVERLAP = 'NO_TEMPORAL_OVERLAP'
    NO_CROSS_SOURCE_PAIRS = 'NO_CROSS_SOURCE_PAIRS'
    NO_SEGMENT_POINTS = 'NO_SEGMENT_POINTS'


class DivergenceError(NumericalError):
    """Training produced a non-finite loss.

    ``last_good`` holds the model state from before the failing step.
    """

    default_message = 'Training diverged.'
    default_code = 'DIVERGENCE'

    def __init__(self, message=None, last_good=None, step=None, details=None):
        details = dict(details or {})
        if step is not None:
            details['step'] = step
        super().__init__(message=message, details=details)
        self.last_good = last_good
        self.step = step


def from_validation_error(exc, exception_class=ConfigurationError):
    """Convert a Django ValidationError into a pipeline exception."""
    if not isinstance(exc, ValidationError):
        return exception_class(str(exc))

    messages = exc.messages
    code = getattr(exc, 'code', None) or exception_class.default_code
    return exception_class(
        message=messages[0] if messages else exception_class.default_message,
        code=code.upper(),
        details={'messages': messages},
    )
