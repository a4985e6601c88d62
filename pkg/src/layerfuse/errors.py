"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class ContractError(RuntimeError):
    """A caller violated an operation's precondition."""


class ConfigError(ValueError):
    """Invalid configuration. ``field`` names the offending entry when known."""

    def __init__(self, message: str, field: str | None = None):
        self.field = field
        super().__init__(f"{field}: {message}" if field else message)


class InputError(ValueError):
    """Malformed model input, e.g. an out-of-range token id."""


class ConllParseError(ValueError):
    def __init__(self, path, lineno: int, message: str):
        self.path = path
        self.lineno = lineno
        super().__init__(f"{path}:{lineno}: {message}")


class TrainingDiverged(RuntimeError):
    """Loss became non-finite. Carries the position and the partial history."""

    def __init__(self, epoch: int, step: int, history=None):
        self.epoch = epoch
        self.step = step
        self.history = history
        super().__init__(f"non-finite loss at epoch {epoch}, step {step}")
