"""
Exceptions raised across langskill.

Each error subclasses the builtin a caller would naturally catch, so code that only
knows about ``ValueError`` or ``RuntimeError`` keeps working.
"""

from typing import Optional, Sequence


class UserError(Exception):
    """Marker for errors caused by user input; the CLI maps these to exit code 1."""


class ShapeError(ValueError):
    """Operand shapes are incompatible for an operation."""

    def __init__(self, op: str, *shapes: Sequence[int], detail: str = "") -> None:
        """
        Initialize the ShapeError object.

        :param op: Name of the operation
        :type op: str
        :param shapes: Offending operand shapes
        :type shapes: Sequence[int]
        :param detail: Optional extra description
        :type detail: str, optional
        """
        self.op = op
        self.shapes = tuple(tuple(int(d) for d in s) for s in shapes)
        shape_text = " and ".join(str(s) for s in self.shapes)
        message = f"{op}: incompatible shapes {shape_text}"
        if detail:
            message = f"{message} ({detail})"
        super().__init__(message)


class GatherIndexError(IndexError):
    """Integer gather index outside the table."""


class NonFiniteError(ValueError):
    """A NaN or infinity was found where finite values are required."""

    def __init__(self, message: str, where: Optional[str] = None) -> None:
        self.where = where
        super().__init__(f"{message} at {where}" if where else message)


class GraphError(RuntimeError):
    """Misuse of the reverse-mode graph (non-scalar loss, repeated backward)."""


class TokenizationError(UserError, ValueError):
    """Text contains a word outside the closed vocabulary."""


class TaskGenerationError(RuntimeError):
    """The task generator could not place a satisfiable layout."""


class HoldoutError(UserError, RuntimeError):
    """Dataset holdout constraints cannot be satisfied."""


class ConfigError(UserError, ValueError):
    """Configuration file is malformed or inconsistent."""

    def __init__(self, message: str, line: Optional[int] = None) -> None:
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class CheckpointError(UserError, ValueError):
    """Checkpoint is unreadable or does not match the requested configuration."""

    def __init__(self, message: str, fields: Sequence[str] = ()) -> None:
        self.fields = list(fields)
        super().__init__(f"{message}: {', '.join(self.fields)}" if self.fields else message)


class TrainingDivergedError(RuntimeError):
    """A training loss became non-finite."""

    def __init__(self, message: str, trajectory_index: int) -> None:
        self.trajectory_index = trajectory_index
        super().__init__(f"{message} (trajectory index {trajectory_index})")
