"""Exception hierarchy shared across the package."""


class IronyMTError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(IronyMTError, ValueError):
    """Operand shapes are incompatible for the requested operation."""


class LabelError(IronyMTError, ValueError):
    """A class label is outside the valid range."""


class ConfigError(IronyMTError, ValueError):
    """A configuration value is invalid or inconsistent."""


class ContractError(IronyMTError, RuntimeError):
    """A caller violated a documented precondition."""


class StateError(IronyMTError, RuntimeError):
    """Optimizer state does not match the parameters it updates."""


class DataError(IronyMTError, ValueError):
    """Input data is empty, insufficient, or otherwise unusable."""


class ParseError(DataError):
    """A dataset file could not be parsed."""

    def __init__(self, path, line: int, message: str):
        self.path = str(path)
        self.line = line
        super().__init__(f"{self.path}:{line}: {message}")


class TaskLookupError(IronyMTError, KeyError):
    """A task name does not match any head in the model."""

    def __str__(self) -> str:
        return str(self.args[0]) if self.args else ""


class CheckpointError(IronyMTError):
    """Base class for checkpoint loading and compatibility failures."""


class CheckpointVersionError(CheckpointError):
    """The file was written with an unsupported format version."""


class CheckpointTruncatedError(CheckpointError):
    """The file ends before the declared parameter block does."""


class CheckpointIntegrityError(CheckpointError):
    """The parameter block does not match its recorded checksum."""


class FingerprintError(CheckpointError):
    """The checkpoint was built against a different vocabulary."""


class CheckpointConfigError(CheckpointError):
    """A checkpoint's configuration disagrees with the requested one."""

    def __init__(self, differing: dict):
        self.differing = differing
        parts = ", ".join(f"{k}: {a!r} != {b!r}" for k, (a, b) in sorted(differing.items()))
        super().__init__(f"checkpoint config mismatch ({parts})")
