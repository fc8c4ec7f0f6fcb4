"""Exception types shared across the toolkit."""


class DataFormatError(ValueError):
    """Raw dataset bytes do not match the published binary layout."""


class DataConsistencyError(ValueError):
    """Two dataset artifacts that must agree (e.g. image/label counts) do not."""


class TrainingDivergenceError(RuntimeError):
    """Training produced a non-finite loss; carries the offending epoch."""

    def __init__(self, message, epoch=None):
        super().__init__(message)
        self.epoch = epoch


class CheckpointError(RuntimeError):
    """Checkpoint is unreadable or does not match the requesting run."""


class NumericError(RuntimeError):
    """A computation produced NaN/Inf where a finite value is required."""


class ConfigError(ValueError):
    """Run configuration violates the schema; carries a JSON-pointer-ish path."""

    def __init__(self, message, pointer=""):
        super().__init__(f"{pointer}: {message}" if pointer else message)
        self.pointer = pointer


class DependencyError(RuntimeError):
    """A pipeline stage was invoked before the stage that produces its input."""
