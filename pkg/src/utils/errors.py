"""Exception hierarchy. Every error knows the exit code the command line reports."""

from typing import Optional


class ErrorDiffusionError(Exception):
    """Base class for every error raised by the toolkit."""

    exit_code = 1


class ConfigError(ErrorDiffusionError):
    """Invalid flags, format names or model descriptions."""

    exit_code = 2


class UnknownFormatError(ConfigError, KeyError):
    """Format name not present in the registry and not a valid custom string."""

    def __str__(self) -> str:
        return str(self.args[0]) if self.args else "unknown format"


class GraphError(ConfigError):
    """Malformed model graph (cycles, dangling inputs, unknown kinds)."""


class ArtifactIOError(ErrorDiffusionError):
    """Missing, corrupt or truncated files."""

    exit_code = 3


class ShapeError(ErrorDiffusionError, ValueError):
    """Dimension mismatch between tensors."""

    exit_code = 4


class NumericalAbort(ErrorDiffusionError):
    """Non-finite value found on ingest or produced by an update."""

    exit_code = 5

    def __init__(self, message: str, layer: Optional[str] = None, column: Optional[int] = None):
        super().__init__(message)
        self.layer = layer
        self.column = column

    def __str__(self) -> str:
        message = self.args[0] if self.args else "numerical abort"
        where = []
        if self.layer is not None:
            where.append(f"layer={self.layer}")
        if self.column is not None:
            where.append(f"column={self.column}")
        return f"{message} ({', '.join(where)})" if where else message


class FormatError(NumericalAbort, ValueError):
    """Value cannot be encoded in the requested number format."""


class ArtifactMismatch(ErrorDiffusionError):
    """Stored report disagrees with numbers recomputed from artifacts."""

    exit_code = 6
