"""
Centralized error handling for the flatdiv laboratory.

This module defines the domain exceptions raised by the numerical services, the error codes
they map to, and the ErrorHandler used by the CLI to log failures with context and turn them
into stable process exit codes.
"""

import logging
import time
from datetime import datetime, timezone
from typing import Dict, Any, Optional, Tuple
from enum import Enum

from pydantic import ValidationError

from flatdiv.models.reports import ErrorReport


class ErrorCode(str, Enum):
    """Enumeration of error codes for different failure scenarios."""

    # Input errors
    VALIDATION_ERROR = "VALIDATION_ERROR"
    SHAPE_MISMATCH = "SHAPE_MISMATCH"
    INVALID_PARAMETER = "INVALID_PARAMETER"
    ORDER_CAP_EXCEEDED = "ORDER_CAP_EXCEEDED"

    # Numerical failures
    EIGEN_NONCONVERGENCE = "EIGEN_NONCONVERGENCE"
    BOUND_UNDEFINED = "BOUND_UNDEFINED"
    NEGATIVE_BOUND_CONSTANT = "NEGATIVE_BOUND_CONSTANT"
    ROOT_NOT_BRACKETED = "ROOT_NOT_BRACKETED"
    UNDEFINED_METRIC = "UNDEFINED_METRIC"
    NON_FINITE = "NON_FINITE"
    DIVERGENCE = "DIVERGENCE"
    UNSTABLE_STEP = "UNSTABLE_STEP"
    CHECKPOINT_MISMATCH = "CHECKPOINT_MISMATCH"
    INTERNAL_ERROR = "INTERNAL_ERROR"

    # Verification outcome
    VERIFICATION_FAILED = "VERIFICATION_FAILED"


class FlatDivError(Exception):
    """Base class for all domain errors."""

    code: ErrorCode = ErrorCode.INTERNAL_ERROR

    def __init__(self, message: str, details: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.message = message
        self.details = details or {}


class ConfigValidationError(FlatDivError):
    code = ErrorCode.VALIDATION_ERROR


class ShapeMismatchError(FlatDivError):
    code = ErrorCode.SHAPE_MISMATCH


class InvalidParameterError(FlatDivError):
    code = ErrorCode.INVALID_PARAMETER


class OrderCapError(FlatDivError):
    code = ErrorCode.ORDER_CAP_EXCEEDED


class EigenDecompositionError(FlatDivError):
    code = ErrorCode.EIGEN_NONCONVERGENCE


class BoundUndefinedError(FlatDivError):
    code = ErrorCode.BOUND_UNDEFINED


class NegativeBoundConstantError(FlatDivError):
    code = ErrorCode.NEGATIVE_BOUND_CONSTANT


class RootBracketError(FlatDivError):
    code = ErrorCode.ROOT_NOT_BRACKETED


class UndefinedMetricError(FlatDivError):
    code = ErrorCode.UNDEFINED_METRIC


class NonFiniteError(FlatDivError):
    code = ErrorCode.NON_FINITE


class DivergenceError(FlatDivError):
    code = ErrorCode.DIVERGENCE


class UnstableStepError(FlatDivError):
    code = ErrorCode.UNSTABLE_STEP


class CheckpointError(FlatDivError):
    code = ErrorCode.CHECKPOINT_MISMATCH


class VerificationFailedError(FlatDivError):
    code = ErrorCode.VERIFICATION_FAILED


class ErrorHandler:
    """
    Centralized error handling with consistent reporting and exit codes.

    The CLI routes every exception through this class so that failures are logged with
    structured context and the process exit code follows one contract:
    0 success, 1 validation error, 2 runtime failure, 3 verification failure.
    """

    EXIT_SUCCESS = 0

    # Error code to process exit code mapping
    ERROR_EXIT_CODE_MAPPING: Dict[ErrorCode, int] = {
        # Input errors
        ErrorCode.VALIDATION_ERROR: 1,
        ErrorCode.SHAPE_MISMATCH: 1,
        ErrorCode.INVALID_PARAMETER: 1,
        ErrorCode.ORDER_CAP_EXCEEDED: 1,

        # Runtime failures
        ErrorCode.EIGEN_NONCONVERGENCE: 2,
        ErrorCode.BOUND_UNDEFINED: 2,
        ErrorCode.NEGATIVE_BOUND_CONSTANT: 2,
        ErrorCode.ROOT_NOT_BRACKETED: 2,
        ErrorCode.UNDEFINED_METRIC: 2,
        ErrorCode.NON_FINITE: 2,
        ErrorCode.DIVERGENCE: 2,
        ErrorCode.UNSTABLE_STEP: 2,
        ErrorCode.CHECKPOINT_MISMATCH: 2,
        ErrorCode.INTERNAL_ERROR: 2,

        # Verification
        ErrorCode.VERIFICATION_FAILED: 3,
    }

    # Error code to default message mapping
    ERROR_MESSAGES: Dict[ErrorCode, str] = {
        ErrorCode.VALIDATION_ERROR: "Configuration validation failed",
        ErrorCode.SHAPE_MISMATCH: "Array shapes are incompatible",
        ErrorCode.INVALID_PARAMETER: "Parameter outside its valid range",
        ErrorCode.ORDER_CAP_EXCEEDED: "Moment order exceeds the configured cap",
        ErrorCode.EIGEN_NONCONVERGENCE: "Symmetric eigendecomposition did not converge",
        ErrorCode.BOUND_UNDEFINED: "Jensen-gap constant undefined",
        ErrorCode.NEGATIVE_BOUND_CONSTANT: "Negative bound constant",
        ErrorCode.ROOT_NOT_BRACKETED: "Trust-region secular equation root not bracketed",
        ErrorCode.UNDEFINED_METRIC: "Metric undefined for the given predictions",
        ErrorCode.NON_FINITE: "Non-finite value encountered",
        ErrorCode.DIVERGENCE: "Training diverged",
        ErrorCode.UNSTABLE_STEP: "SAM step size does not contract the dynamics",
        ErrorCode.CHECKPOINT_MISMATCH: "Checkpoint incompatible with this build or config",
        ErrorCode.INTERNAL_ERROR: "An unexpected error occurred",
        ErrorCode.VERIFICATION_FAILED: "One or more verification cells failed",
    }

    def __init__(self, logger: Optional[logging.Logger] = None):
        """
        Initialize the ErrorHandler.

        Args:
            logger: Optional logger instance. If not provided, creates a new logger.
        """
        self.logger = logger or logging.getLogger(__name__)
        self._run_start_times: Dict[str, float] = {}

    def start_run_timing(self, run_id: str) -> None:
        """
        Start timing a run.

        Args:
            run_id: Unique identifier for the run
        """
        self._run_start_times[run_id] = time.time()

    def get_run_duration(self, run_id: str) -> Optional[float]:
        """
        Get the duration of a run in seconds.

        Args:
            run_id: Unique identifier for the run

        Returns:
            Duration in seconds, or None if timing wasn't started
        """
        start_time = self._run_start_times.pop(run_id, None)
        if start_time is None:
            return None
        return time.time() - start_time

    def exit_code_for(self, error_code: ErrorCode) -> int:
        """Map an error code to the process exit code."""
        return self.ERROR_EXIT_CODE_MAPPING.get(error_code, 2)

    def create_error_report(
        self,
        error_code: ErrorCode,
        message: Optional[str] = None,
        details: Optional[Dict[str, Any]] = None
    ) -> ErrorReport:
        """
        Create a standardized error report.

        Args:
            error_code: The error code enum value
            message: Optional custom error message. If not provided, uses default message.
            details: Optional additional error details

        Returns:
            ErrorReport: Standardized error report object
        """
        final_message = message or self.ERROR_MESSAGES.get(error_code, "Unknown error")

        return ErrorReport(
            error=error_code.value,
            message=final_message,
            details=details or {},
            exit_code=self.exit_code_for(error_code),
            timestamp=datetime.now(timezone.utc)
        )

    def log_error(
        self,
        error_code: ErrorCode,
        message: str,
        exception: Optional[Exception] = None,
        run_id: Optional[str] = None,
        command: Optional[str] = None,
        additional_context: Optional[Dict[str, Any]] = None
    ) -> None:
        """
        Log error with context information.

        Args:
            error_code: The error code enum value
            message: Error message
            exception: Optional exception that caused the error
            run_id: Optional unique run identifier
            command: Optional CLI command being executed
            additional_context: Optional additional context information
        """
        context: Dict[str, Any] = {
            "error_code": error_code.value,
            "exit_code": self.exit_code_for(error_code),
            "timestamp": datetime.now(timezone.utc).isoformat(),
        }

        if run_id:
            context["run_id"] = run_id
            duration = self.get_run_duration(run_id)
            if duration:
                context["duration_seconds"] = round(duration, 3)

        if command:
            context["command"] = command

        if isinstance(exception, FlatDivError) and exception.details:
            context["details"] = exception.details

        if additional_context:
            context.update(additional_context)

        log_message = f"{error_code.value}: {message}"

        if exception is not None and not isinstance(exception, FlatDivError):
            self.logger.error(log_message, extra={"context": context}, exc_info=True)
        else:
            self.logger.error(log_message, extra={"context": context})

    def format_validation_error(self, error: ValidationError) -> str:
        """
        Render a pydantic ValidationError with dotted key paths.

        Args:
            error: The validation error

        Returns:
            One line per failing key, ``path: message``
        """
        lines = []
        for item in error.errors():
            path = ".".join(str(part) for part in item.get("loc", ())) or "<root>"
            lines.append(f"{path}: {item.get('msg', 'invalid value')}")
        return "; ".join(lines)

    def handle_exception(
        self,
        error: Exception,
        run_id: Optional[str] = None,
        command: Optional[str] = None
    ) -> Tuple[ErrorCode, str]:
        """
        Classify an exception, log it, and return its error code and message.

        Args:
            error: The exception raised by a command
            run_id: Optional unique run identifier
            command: Optional CLI command being executed

        Returns:
            Tuple of (ErrorCode, error_message)
        """
        if isinstance(error, FlatDivError):
            error_code = error.code
            message = error.message
        elif isinstance(error, ValidationError):
            error_code = ErrorCode.VALIDATION_ERROR
            message = f"Invalid configuration: {self.format_validation_error(error)}"
        elif isinstance(error, (FloatingPointError, OverflowError)):
            error_code = ErrorCode.NON_FINITE
            message = f"Numerical overflow: {error}"
        else:
            error_code = ErrorCode.INTERNAL_ERROR
            message = f"Unexpected error: {error}"

        self.log_error(
            error_code=error_code,
            message=message,
            exception=error,
            run_id=run_id,
            command=command,
            additional_context={"error_type": type(error).__name__}
        )

        return error_code, message


# Global error handler instance
error_handler = ErrorHandler()
