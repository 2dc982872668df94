"""Exception hierarchy shared by every stage of the pipeline."""

from __future__ import annotations


class MoeSteerError(Exception):
    """Base class for all package errors."""


class DimensionError(MoeSteerError, ValueError):
    pass


class ContractError(MoeSteerError, ValueError):
    pass


class OptimizerError(MoeSteerError, FloatingPointError):
    def __init__(self, message: str, *, param: str | None = None, step: int | None = None):
        super().__init__(message)
        self.param = param
        self.step = step


class TrainingError(MoeSteerError, FloatingPointError):
    def __init__(self, message: str, *, epoch: int | None = None):
        super().__init__(message)
        self.epoch = epoch


class PropagationError(MoeSteerError, FloatingPointError):
    pass


class InjectionError(MoeSteerError, ValueError):
    pass


class InputError(MoeSteerError, ValueError):
    pass


class FixtureSpecError(MoeSteerError, ValueError):
    pass


class SplitError(MoeSteerError, ValueError):
    pass


class FormatError(MoeSteerError, ValueError):
    """Malformed or inconsistent file. ``offset`` is the byte position where parsing failed."""

    def __init__(self, message: str, *, offset: int | None = None, trace_index: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset
        self.trace_index = trace_index
