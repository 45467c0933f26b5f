class GanLMError(Exception):
    """Base class for every error raised by the app package."""

    exit_code = 1


class ConfigError(GanLMError):
    """Invalid or inconsistent configuration."""

    exit_code = 2


class DataError(GanLMError):
    """Corpus or batch content that cannot be used as given."""

    exit_code = 2


class VocabError(GanLMError):
    exit_code = 2


class CheckpointError(GanLMError):
    exit_code = 3


class NumericError(GanLMError):
    """Non-finite values or a non-deterministic function where determinism is required."""

    exit_code = 4


class ShapeError(GanLMError, ValueError):
    """
    Shape mismatch inside a tensor op.

    Args:
        op (str): Name of the op that rejected its inputs.
        left (tuple): Shape of the first operand.
        right (tuple): Shape of the second operand.
    """

    exit_code = 4

    def __init__(self, op, left, right, detail=""):
        self.op = op
        self.left = tuple(left)
        self.right = tuple(right)
        message = f"{op}: incompatible shapes {self.left} and {self.right}"
        if detail:
            message += f" ({detail})"
        super().__init__(message)
