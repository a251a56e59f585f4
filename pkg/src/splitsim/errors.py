"""Exception hierarchy shared across the simulator."""


class SimulatorError(Exception):
    """Base class for all errors raised by this package."""


class ConfigurationError(SimulatorError):
    """Structural problem: mismatched dimensions, invalid architecture, bad wiring."""


class InputError(SimulatorError):
    """A value-level precondition on user data was violated."""


class FormatError(SimulatorError):
    """A file could not be parsed (corrupt header, truncation, bad cell)."""


class SolverError(SimulatorError):
    """A linear system could not be solved (singular or indefinite)."""


class PlanError(SimulatorError):
    """A round plan violates the bandwidth/selection constraints."""


class ProtocolError(SimulatorError):
    """A protocol round was invoked with inadmissible arguments."""


class DivergedError(ProtocolError):
    """Training produced a non-finite loss; carries the offending round."""

    def __init__(self, round_index: int, message: str | None = None):
        self.round_index = round_index
        super().__init__(message or f"training diverged in round {round_index}")


class ComparisonError(SimulatorError):
    """Run outputs cannot be compared (e.g. different dataset seeds)."""


class SchemaError(ConfigurationError):
    """An experiment config file failed strict validation."""
