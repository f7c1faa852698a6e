"""
Exception hierarchy for the nested Fourier-DeepONet engine.

Every engine failure derives from ``EngineError`` and carries the process exit
code the command-line entry point reports for it.

Example:
    ```python
    from src.errors import EngineError

    try:
        run_command(args)
    except EngineError as e:
        sys.exit(e.exit_code)
    ```
"""


class EngineError(Exception):
    """Base class for all engine errors."""

    exit_code: int = 1


class ShapeError(EngineError):
    """Tensor extents do not satisfy an operation's shape contract."""


class ContractError(EngineError):
    """A precondition of an operation was violated."""


class ConfigurationError(EngineError):
    """A configuration document or architecture description is invalid."""

    exit_code = 2


class DatasetIOError(EngineError):
    """Reading or writing an artifact on disk failed."""

    exit_code = 3


class FormatError(DatasetIOError):
    """A binary artifact is corrupt or truncated."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class MissingCheckpointError(EngineError):
    """A model checkpoint required by a command is not on disk."""

    exit_code = 4


class MetricUndefinedError(EngineError):
    """A metric is undefined for every evaluated sample (e.g. empty plume)."""

    exit_code = 5


class EmptySplitError(EngineError):
    """A study split selected no samples."""

    exit_code = 6

    def __init__(self, split: str):
        super().__init__(f"split '{split}' is empty")
        self.split = split


class SolverError(EngineError):
    """The toy forward solver cannot advance within its stability bound."""


class TrainingError(EngineError):
    """Optimization hit a non-finite gradient or loss."""

    def __init__(self, message: str, parameter: str | None = None):
        super().__init__(message if parameter is None else f"{message} (parameter '{parameter}')")
        self.parameter = parameter
