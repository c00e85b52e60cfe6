"""Exception types shared across the simulator."""


class ParseError(ValueError):
    """A scene or mesh file is malformed."""


class ValidationError(ValueError):
    """Parsed data violates a structural invariant (bad index, degenerate element, ...)."""


class SimulationDiverged(RuntimeError):
    """A particle position became non-finite; carries the offending step index."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class CheckpointError(ValueError):
    """A policy checkpoint is unreadable or shaped incompatibly."""
