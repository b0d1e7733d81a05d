"""Exception types shared across the package."""


class AmelError(Exception):
    """Base class for all package errors."""


class ShapeMismatchError(AmelError, ValueError):
    """An operation received tensors whose shapes are incompatible.

    The message names the offending dimension so callers can diagnose
    config/data mismatches without a debugger.
    """

    def __init__(self, op: str, dimension: str, expected, actual):
        self.op = op
        self.dimension = dimension
        self.expected = expected
        self.actual = actual
        super().__init__(
            f"{op}: dimension '{dimension}' mismatch: expected {expected}, got {actual}"
        )


class UninitializedStatsError(AmelError, RuntimeError):
    """Eval-mode batch norm was asked to read running statistics that were
    never written by a train-mode forward nor explicitly seeded."""

    def __init__(self, where: str = "batch_norm"):
        super().__init__(f"{where}: uninitialized running statistics")


class GradientError(AmelError, RuntimeError):
    """Backward-pass contract violation (non-scalar loss, off-tape loss,
    gradient shape drift)."""


class DataFormatError(AmelError, ValueError):
    """Dataset or checkpoint file does not match the expected binary layout."""


class ConfigError(AmelError, ValueError):
    """A run configuration field failed validation.

    ``field`` names the offending entry so CLI errors stay actionable.
    """

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"config field '{field}': {message}")


class TrainingDivergedError(AmelError, RuntimeError):
    """A training phase produced a non-finite loss."""

    def __init__(self, phase: str, iteration: int, value: float):
        self.phase = phase
        self.iteration = iteration
        super().__init__(
            f"non-finite loss in phase '{phase}' at iteration {iteration}: {value!r}"
        )
