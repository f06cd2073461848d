"""Exception types shared across the package."""


class DecompError(Exception):
    """Base class for all package errors."""


class ShapeError(DecompError, ValueError):
    """Operands have incompatible shapes."""


class GraphStateError(DecompError, RuntimeError):
    """The compute graph is missing or was already consumed by a backward pass."""


class FormatError(DecompError, ValueError):
    """A file does not follow the expected binary or text layout."""

    def __init__(self, message, offset=None, path=None):
        parts = [message]
        if offset is not None:
            parts.append(f"at byte offset {offset}")
        if path is not None:
            parts.append(f"in {path}")
        super().__init__(" ".join(parts))
        self.offset = offset
        self.path = path


class TruncatedFileError(DecompError, OSError):
    """A file ended before all declared data could be read."""


class ConsistencyError(DecompError, ValueError):
    """Two inputs that must agree (counts, ids) do not."""


class DependencyError(DecompError, RuntimeError):
    """A required model or checkpoint is not available."""
