"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class ContractError(ValueError):
    """Raised when a caller violates an operation's precondition."""


class ConfigError(ValueError):
    """Raised for invalid configuration; carries the offending key."""

    def __init__(self, key: str, message: str):
        super().__init__(f"config key '{key}': {message}")
        self.key = key


class CheckpointError(RuntimeError):
    """Raised when a checkpoint file cannot be read or written."""
