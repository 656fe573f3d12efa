"""
Errors raised throughout the package
"""

from typing import Any


class ClockDistillError(Exception):
    """Root of every error this package raises on purpose."""


class GridBoundsError(ClockDistillError, IndexError):
    pass


class DegenerateBoxError(ClockDistillError, ValueError):
    pass


class BoxFormError(ClockDistillError, ValueError):
    pass


class ConfigurationError(ClockDistillError, ValueError):
    pass


class ShapeMismatchError(ClockDistillError, ValueError):
    pass


class LayerSelectorError(ClockDistillError, ValueError):
    pass


class EmptySplitError(ClockDistillError, ValueError):
    pass


class AnnotationParseError(ClockDistillError, ValueError):
    def __init__(self, message: str, record_id: int | str | None = None) -> None:
        """
        :param message: what is wrong with the record
        :param record_id: id of the offending COCO record, when known
        """
        self.record_id = record_id
        prefix = f"record {record_id}: " if record_id is not None else ""
        super().__init__(f"{prefix}{message}")


class QuerySetMismatchError(ClockDistillError, RuntimeError):
    pass


class ModelNotLoadedError(ClockDistillError, RuntimeError):
    pass


class NonFiniteLossError(ClockDistillError, RuntimeError):
    def __init__(self, message: str, diagnostics: dict[str, Any]) -> None:
        self.diagnostics = diagnostics
        super().__init__(f"{message}: {diagnostics}")
