class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ArgumentError(ValueError):
    """An argument is outside its valid domain."""


class NumericError(ArithmeticError):
    """A NaN or other non-finite value reached a guarded computation."""


class TrainingError(RuntimeError):
    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class CheckpointError(RuntimeError):
    """Checkpoint is corrupt, truncated or was written for a different config."""


class GenerationError(RuntimeError):
    """Phantom geometry could not be placed inside the image."""
