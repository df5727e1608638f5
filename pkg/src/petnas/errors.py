"""Exception types raised across the package."""


class PetNasError(Exception):
    """Base class for all package errors."""


class DimensionError(PetNasError, ValueError):
    pass


class UsageError(PetNasError, RuntimeError):
    pass


class InputError(PetNasError, ValueError):
    pass


class ParseError(InputError):
    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


class ConfigError(PetNasError, ValueError):
    """Invalid configuration; ``field`` names the offending key."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class AttachmentError(PetNasError, ValueError):
    pass


class DivergenceError(PetNasError, ArithmeticError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"non-finite loss {loss!r} at step {step}")
        self.step = step
        self.loss = loss
