class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class NumericError(FloatingPointError):
    """A computation produced NaN or Inf."""


class ContractError(ValueError):
    """A precondition of an operation was violated."""


class ConfigError(ValueError):
    """Invalid configuration value or combination."""


class DatasetParseError(ValueError):
    """Malformed dataset record; carries the 1-based line number."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class TokenizationError(ValueError):
    """Text contains characters outside the alphabet."""


class TrainingDiverged(RuntimeError):
    def __init__(self, step, checkpoint_path=None, cause=None):
        self.step = step
        self.checkpoint_path = checkpoint_path
        msg = f"training diverged at step {step}"
        if checkpoint_path is not None:
            msg += f"; last good checkpoint: {checkpoint_path}"
        if cause is not None:
            msg += f" ({cause})"
        super().__init__(msg)
