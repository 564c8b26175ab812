from typing import Union, List

import jsonschema
import pydantic


class SliceOrchError(Exception):
    errors = None

    def __init__(self, error: Union[None, str, List[str]] = None, severity="error", code="invalid"):
        self.severity = severity
        self.code = code
        if isinstance(error, list):
            self.errors = error
        elif isinstance(error, str):
            self.errors = [error]
        else:
            self.errors = []

        super().__init__(self.errors)

    def format(self) -> List[dict]:
        return [
            {"severity": self.severity, "code": self.code, "diagnostics": err}
            for err in self.errors
        ]

    def __str__(self):
        return "; ".join(self.errors)


class ConfigurationError(SliceOrchError):
    """
    ConfigurationError is raised when a scenario or experiment is semantically invalid
    (eg: no slices, non-positive capacity, assignments that do not partition the domains).
    """

    def __init__(self, error: Union[str, List[str]]):
        super().__init__(error, severity="error", code="invalid")


class ValidationError(SliceOrchError):
    """
    ValidationError wraps a pydantic.ValidationError or a jsonschema.ValidationError.
    `locate` maps a location (tuple of keys) to a line number in the source text.
    """

    def __init__(self, e, locate=None):
        if isinstance(e, pydantic.ValidationError):
            errors = []
            for err in e.errors():
                loc = tuple(err["loc"])
                errors.append(_with_line(f"{err['msg']}: {'.'.join(str(l) for l in loc)}", loc, locate))
        elif isinstance(e, jsonschema.ValidationError):
            loc = tuple(e.absolute_path)
            if e.validator == "additionalProperties" and isinstance(e.instance, dict):
                extras = [k for k in e.instance if k not in e.schema.get("properties", {})]
                loc = loc + tuple(extras[:1])
            where = ".".join(str(l) for l in loc) or "<root>"
            errors = [_with_line(f"{e.message}: {where}", loc, locate)]
        elif isinstance(e, str):
            errors = [e]
        elif isinstance(e, list):
            errors = e
        else:
            raise SliceOrchError(
                "ValidationError must be initiated with a pydantic.ValidationError, "
                "a jsonschema.ValidationError or a string"
            )
        super().__init__(errors, severity="error", code="invalid")


def _with_line(message: str, loc: tuple, locate) -> str:
    if locate is None:
        return message
    line = locate(loc)
    return f"line {line}: {message}" if line else message


class FeasibilityError(SliceOrchError):
    """
    FeasibilityError is raised when an allocation exceeds a domain's capacity.
    """

    def __init__(self, error: str):
        super().__init__(error, severity="error", code="infeasible")


class DimensionError(SliceOrchError):
    def __init__(self, error: str):
        super().__init__(error, severity="error", code="dimension")


class NonFiniteError(SliceOrchError):
    """
    NonFiniteError is raised when a gradient, a probability ratio or a regression target
    is NaN or infinite. Callers decide whether to skip the batch.
    """

    def __init__(self, error: str):
        super().__init__(error, severity="error", code="non-finite")


class CheckpointError(SliceOrchError):
    def __init__(self, error: str):
        super().__init__(error, severity="error", code="checkpoint")


class SchemaMismatchError(SliceOrchError):
    def __init__(self, error: str):
        super().__init__(error, severity="error", code="schema")


class UpdateRejectedError(SliceOrchError):
    """
    UpdateRejectedError is raised when one agent of a synchronized batch fails to update;
    every agent of the batch has been rolled back when it surfaces.
    """

    def __init__(self, error: str):
        super().__init__(error, severity="error", code="conflict")


class TrainingError(SliceOrchError):
    def __init__(self, error: str, report=None):
        self.report = report
        super().__init__(error, severity="error", code="exception")


def describe(exc: Exception) -> List[dict]:
    """Issue list for any exception, used in run manifests."""
    if isinstance(exc, SliceOrchError):
        return exc.format()
    return [{"severity": "fatal", "code": "exception", "diagnostics": f"{type(exc).__name__}: {exc}"}]

