"""Exception types shared across the package."""


class StrutexError(Exception):
    """Base class for all package errors."""


class ConfigurationError(StrutexError, ValueError):
    """Invalid generation / model / run configuration value or key."""


class ShapeError(StrutexError, ValueError):
    """Tensor shape violates an operation contract."""


class DataError(StrutexError, ValueError):
    """Dataset content out of contract (bad class ids, corrupt records)."""


class DatasetExistsError(StrutexError, OSError):
    """Refusing to write into an existing non-empty dataset directory."""


class MissingLabelError(StrutexError, LookupError):
    """Labels were requested for records that carry none."""


class EmptyReportError(StrutexError, ValueError):
    """Evaluation over zero valid pixels / zero defined classes."""


class TrainingAbortError(StrutexError, RuntimeError):
    """A loss term became non-finite; carries the offending term name."""

    def __init__(self, term: str, value: float):
        super().__init__(f"non-finite loss term {term!r}: {value!r}")
        self.term = term
        self.value = value


class CheckpointError(StrutexError, RuntimeError):
    """Checkpoint archive is unreadable, truncated, or missing a group."""
