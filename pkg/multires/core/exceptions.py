import logging
from typing import Any, Dict

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_NUMERICAL = 3


class MultiresException(Exception):
    """Base exception for the multiresolution estimation package"""

    def __init__(
        self, message: str, exit_code: int = 1, details: Dict[str, Any] = None
    ):
        self.message = message
        self.exit_code = exit_code
        self.details = details or {}
        super().__init__(self.message)


class ValidationException(MultiresException):
    """Raised when input data or configuration fails validation"""

    def __init__(self, message: str, field: str = None, row: int = None):
        details = {}
        if field:
            details["field"] = field
        if row is not None:
            details["row"] = row
        super().__init__(message, EXIT_VALIDATION, details)


class NotFoundException(MultiresException):
    """Raised when a county, block, period or file is not found"""

    def __init__(
        self, message: str, resource_type: str = None, resource_id: str = None
    ):
        details = {}
        if resource_type:
            details["resource_type"] = resource_type
        if resource_id:
            details["resource_id"] = resource_id
        super().__init__(message, EXIT_VALIDATION, details)


class ConflictException(MultiresException):
    """Raised when a checkpoint does not match the requested run"""

    def __init__(self, message: str, conflicting_field: str = None):
        details = {"conflicting_field": conflicting_field} if conflicting_field else {}
        super().__init__(message, EXIT_VALIDATION, details)


class NumericalException(MultiresException):
    """Raised when a factorization or sampler invariant breaks"""

    def __init__(self, message: str, details: Dict[str, Any] = None):
        super().__init__(message, EXIT_NUMERICAL, details)


def multires_exception_handler(exc: MultiresException) -> int:
    logger.error(f"❌ {exc.message}", extra={"details": exc.details})
    return exc.exit_code


def general_exception_handler(exc: Exception) -> int:
    logger.error(f"🚨 Unexpected error: {str(exc)}", exc_info=True)
    return 1
