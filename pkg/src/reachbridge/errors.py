"""Exception types shared across the package."""


class ContractViolation(ValueError):
    """An argument breaks the documented precondition of an operation."""


class NumericOverflowError(ArithmeticError):
    """A computation produced a non-finite value."""


class SimulationError(RuntimeError):
    """A closed-loop rollout failed at a given time index."""

    def __init__(self, message: str, time_index: int | None = None):
        super().__init__(message)
        self.time_index = time_index


class DivergenceError(SimulationError):
    """A reachable-set enclosure became non-finite."""


class OracleError(RuntimeError):
    """The high-dimensional controller could not produce an action."""


class TrainingError(RuntimeError):
    """Training diverged (non-finite loss)."""

    def __init__(self, message: str, epoch: int | None = None):
        super().__init__(message)
        self.epoch = epoch


class ParseError(ValueError):
    """Malformed model or configuration payload."""

    def __init__(self, message: str, position: int | str | None = None):
        super().__init__(f"{message} (at {position})" if position is not None else message)
        self.position = position


class ConfigError(ValueError):
    """Invalid run configuration; ``field`` names the offending entry."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field
