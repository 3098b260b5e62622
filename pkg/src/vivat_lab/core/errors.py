from __future__ import annotations


class VivatError(Exception):
    """Base class for every error raised by vivat_lab."""


class ValidationError(VivatError, ValueError):
    pass


class ShapeError(ValidationError):
    pass


class NotApplicableError(ValidationError):
    """A detector or metric has no defined value for this input."""


class ConfigError(VivatError):
    def __init__(self, field: str, message: str) -> None:
        super().__init__(f"{field}: {message}")
        self.field = field
        self.message = message


class DivergenceError(VivatError):
    def __init__(self, component: str, value: float, step: int | None = None) -> None:
        where = f" at step {step}" if step is not None else ""
        super().__init__(f"non-finite loss component {component!r}={value}{where}")
        self.component = component
        self.value = value
        self.step = step


class CheckpointError(VivatError):
    pass


class CheckpointVersionError(CheckpointError):
    def __init__(self, found: int, supported: int) -> None:
        super().__init__(
            f"checkpoint format version {found} is not readable by this reader (supports version {supported})"
        )
        self.found = found
        self.supported = supported


class CheckpointIntegrityError(CheckpointError):
    pass
