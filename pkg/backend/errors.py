"""
Error types raised by the diagnosis pipeline

Each error carries a machine-readable ``error_code`` (reported in failure
payloads) and the process ``exit_code`` the CLI uses for it.
"""
from typing import Optional


class PipelineError(Exception):
    """Base class for every error the pipeline raises on purpose"""

    error_code = "PIPELINE_ERROR"
    exit_code = 1

    def __init__(self, message: str, *, details: Optional[str] = None):
        super().__init__(message)
        self.message = message
        self.details = details

    def to_payload(self) -> dict:
        """Failure payload in the shape the service layer returns"""
        payload = {
            'success': False,
            'error': self.message,
            'error_code': self.error_code,
        }
        if self.details:
            payload['details'] = self.details
        return payload


class InvalidInputError(PipelineError):
    """Input violates a documented precondition"""

    error_code = "INVALID_INPUT"


class UndefinedAUCError(PipelineError):
    """Concordance is undefined because only one class is present"""

    error_code = "UNDEFINED_AUC"


class DegenerateVarianceError(PipelineError):
    """Spiegelhalter Z denominator is zero"""

    error_code = "DEGENERATE_VARIANCE"


class FitError(PipelineError):
    """A calibrator could not be fitted on the given calibration set"""

    error_code = "FIT_ERROR"


class InsufficientDataError(PipelineError):
    """Too few usable observations for a statistical test"""

    error_code = "INSUFFICIENT_DATA"


class UsageError(PipelineError):
    """API or command-line misuse"""

    error_code = "USAGE"
    exit_code = 2


class ParseError(InvalidInputError):
    """A prediction log row failed validation"""

    error_code = "PARSE_ERROR"

    def __init__(self, message: str, *, row: Optional[int] = None, details: Optional[str] = None):
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message, details=details)
        self.row = row
