from typing import Any

from pydantic import BaseModel, ValidationError


class SavcError(Exception):
    code = "savc_error"

    def __init__(self, message: str, *, details: dict[str, Any] | list[Any] | str | None = None) -> None:
        super().__init__(message)
        self.message = message
        self.details = details


class InvalidInputError(SavcError, ValueError):
    code = "invalid_input"


class InvalidConfigError(SavcError, ValueError):
    code = "invalid_config"


class ConfigSchemaError(InvalidConfigError):
    code = "config_schema"

    def __init__(self, message: str, *, offending_keys: list[str]) -> None:
        super().__init__(message, details={"offending_keys": offending_keys})
        self.offending_keys = offending_keys

    @classmethod
    def from_validation_error(cls, exc: ValidationError) -> "ConfigSchemaError":
        keys = sorted({".".join(str(part) for part in error["loc"]) or "<root>" for error in exc.errors()})
        return cls(f"Experiment config failed validation: {', '.join(keys)}", offending_keys=keys)


class InvalidDataError(SavcError, ValueError):
    code = "invalid_data"


class InvalidStateError(SavcError, RuntimeError):
    code = "invalid_state"


class UndefinedSimilarityError(InvalidInputError):
    code = "undefined_similarity"


class UndefinedMetricError(SavcError, ArithmeticError):
    code = "undefined_metric"


class TrainingDivergenceError(SavcError, RuntimeError):
    code = "training_divergence"

    def __init__(self, message: str, *, last_good_state: dict[str, Any] | None = None, step: int | None = None) -> None:
        super().__init__(message, details={"step": step} if step is not None else None)
        self.last_good_state = last_good_state
        self.step = step


class DatasetIOError(SavcError, OSError):
    code = "dataset_io"


class ErrorDetail(BaseModel):
    code: str
    message: str
    details: dict[str, Any] | list[Any] | str | None = None


class ErrorResponse(BaseModel):
    error: ErrorDetail


def error_response(exc: BaseException) -> ErrorResponse:
    if isinstance(exc, SavcError):
        detail = ErrorDetail(code=exc.code, message=exc.message, details=exc.details)
    elif isinstance(exc, OSError):
        detail = ErrorDetail(code="io_error", message=str(exc))
    else:
        detail = ErrorDetail(code="internal_error", message="Unexpected error")
    return ErrorResponse(error=detail)
