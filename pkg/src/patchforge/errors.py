"""Exception hierarchy shared by the engine, the data pipeline and the CLI."""


class PatchforgeError(Exception):
    """Base class; ``exit_code`` is what the CLI returns for it."""

    exit_code = 1


class InvalidShapeError(PatchforgeError, ValueError):
    exit_code = 6


class ContractError(PatchforgeError, ValueError):
    exit_code = 6


class StateError(PatchforgeError, RuntimeError):
    exit_code = 6


class InvalidInputError(PatchforgeError, ValueError):
    exit_code = 6


class MissingInputError(PatchforgeError, FileNotFoundError):
    exit_code = 3


class ManifestParseError(PatchforgeError, ValueError):
    """Malformed or version-mismatched manifest; ``line`` is 1-based."""

    exit_code = 4

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class CheckpointError(PatchforgeError, ValueError):
    exit_code = 4


class DivergenceError(PatchforgeError, ArithmeticError):
    exit_code = 5

    def __init__(self, epoch: int, lr: float, detail: str = "loss is not finite"):
        self.epoch = epoch
        self.lr = lr
        super().__init__(f"training diverged at epoch {epoch} (lr={lr:g}): {detail}")


class EmptySetError(PatchforgeError, RuntimeError):
    """Refinement removed every training patch."""

    exit_code = 7
