"""
regionspot/core/exceptions.py - Custom Exception Classes

Defines toolkit-specific exceptions with error codes and CLI exit-code mappings.
"""

from typing import Any, Dict, Optional


class RegionSpotError(Exception):
    """Base exception for all RegionSpot errors."""

    def __init__(
        self,
        message: str,
        error_code: str = "REGIONSPOT_ERROR",
        details: Optional[Dict[str, Any]] = None
    ):
        self.message = message
        self.error_code = error_code
        self.details = details or {}
        super().__init__(self.message)

    def __str__(self):
        if self.details:
            return f"{self.message} (Details: {self.details})"
        return self.message


class InvalidInputError(RegionSpotError):
    """Raised when an image or array input is empty or non-finite."""

    def __init__(self, message: str = "Invalid input", details: Optional[Dict] = None):
        super().__init__(message=message, error_code="INVALID_INPUT", details=details)


class InvalidBoxError(RegionSpotError):
    """Raised when a box prompt violates x1 < x2, y1 < y2 or leaves [0, 1]."""

    def __init__(self, message: str = "Invalid box", index: Optional[int] = None, details: Optional[Dict] = None):
        self.index = index
        details = dict(details or {})
        if index is not None:
            details["index"] = index
        super().__init__(message=message, error_code="INVALID_BOX", details=details)


class ShapeError(RegionSpotError):
    """Raised when array dimensions disagree with the configured model."""

    def __init__(self, message: str = "Shape mismatch", expected: Any = None, actual: Any = None,
                 details: Optional[Dict] = None):
        self.expected = expected
        self.actual = actual
        details = dict(details or {})
        details.update({"expected": expected, "actual": actual})
        super().__init__(message=message, error_code="SHAPE_ERROR", details=details)


class NumericalError(RegionSpotError):
    """Raised when an intermediate value becomes NaN or infinite."""

    def __init__(self, message: str = "Non-finite intermediate value", details: Optional[Dict] = None):
        super().__init__(message=message, error_code="NUMERICAL_ERROR", details=details)


class DuplicateCategoryError(RegionSpotError):
    """Raised when category names collide after case-folding."""

    def __init__(self, message: str = "Duplicate category", details: Optional[Dict] = None):
        super().__init__(message=message, error_code="DUPLICATE_CATEGORY", details=details)


class TemplateError(RegionSpotError):
    """Raised when a prompt template does not hold exactly one {} placeholder."""

    def __init__(self, message: str = "Malformed prompt template", details: Optional[Dict] = None):
        super().__init__(message=message, error_code="TEMPLATE_ERROR", details=details)


class AnnotationFormatError(RegionSpotError):
    """Raised when an annotation file cannot be parsed."""

    def __init__(self, message: str = "Annotation format error", byte_offset: Optional[int] = None,
                 details: Optional[Dict] = None):
        self.byte_offset = byte_offset
        details = dict(details or {})
        if byte_offset is not None:
            details["byte_offset"] = byte_offset
        super().__init__(message=message, error_code="ANNOTATION_FORMAT", details=details)


class ReferentialIntegrityError(RegionSpotError):
    """Raised when an annotation points at an unknown image or category id."""

    def __init__(self, message: str = "Dangling reference", details: Optional[Dict] = None):
        super().__init__(message=message, error_code="REFERENTIAL_INTEGRITY", details=details)


class DatasetLoadError(RegionSpotError):
    """Raised when a configured dataset cannot be loaded."""

    def __init__(self, message: str = "Dataset load failure", details: Optional[Dict] = None):
        super().__init__(message=message, error_code="DATASET_LOAD", details=details)


class CheckpointError(RegionSpotError):
    """Raised when a checkpoint container is corrupt or cannot be applied."""

    def __init__(self, message: str = "Checkpoint error", details: Optional[Dict] = None):
        super().__init__(message=message, error_code="CHECKPOINT_ERROR", details=details)


class UnsupportedVersionError(CheckpointError):
    """Raised when a checkpoint was written by an unknown format version."""

    def __init__(self, message: str = "Unsupported checkpoint version", details: Optional[Dict] = None):
        super().__init__(message=message, details=details)
        self.error_code = "UNSUPPORTED_VERSION"


class NonFiniteLossError(RegionSpotError):
    """Raised when a training step produces a NaN or infinite loss."""

    def __init__(self, message: str = "Non-finite loss", batch_id: Optional[str] = None,
                 dump_path: Optional[str] = None, details: Optional[Dict] = None):
        self.batch_id = batch_id
        self.dump_path = dump_path
        details = dict(details or {})
        details.update({"batch_id": batch_id, "dump_path": dump_path})
        super().__init__(message=message, error_code="NON_FINITE_LOSS", details=details)


class RangeError(RegionSpotError):
    """Raised when an index (layer, top-k) is out of range."""

    def __init__(self, message: str = "Index out of range", details: Optional[Dict] = None):
        super().__init__(message=message, error_code="RANGE_ERROR", details=details)


class ConfigValidationError(RegionSpotError):
    """Raised when a run configuration fails validation."""

    def __init__(self, message: str = "Configuration error", errors: Optional[list] = None,
                 details: Optional[Dict] = None):
        self.errors = errors or []
        details = dict(details or {})
        if self.errors:
            details["errors"] = self.errors
        super().__init__(message=message, error_code="CONFIG_ERROR", details=details)


# CLI Exit Code Mapping
EXCEPTION_EXIT_CODES = {
    ConfigValidationError: 2,
    RegionSpotError: 1,
}


def exit_code_for(exc: BaseException) -> int:
    """Resolve the process exit code for an exception, walking its MRO."""
    for klass in type(exc).__mro__:
        if klass in EXCEPTION_EXIT_CODES:
            return EXCEPTION_EXIT_CODES[klass]
    return 1
