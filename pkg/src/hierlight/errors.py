"""Exception types shared across the package."""


class HierlightError(Exception):
    """Base class for all package errors."""


class ShapeError(HierlightError, ValueError):
    """Tensor dimensions do not agree."""


class ConfigError(HierlightError, ValueError):
    """A block or operator was configured with invalid arguments."""


class ParseError(HierlightError, ValueError):
    """Malformed model description text."""

    def __init__(self, message, line=None, column=None):
        self.line = line
        self.column = column
        loc = ""
        if line is not None:
            loc = f"line {line}" + (f", column {column}" if column is not None else "") + ": "
        super().__init__(loc + message)


class CompileError(HierlightError, ValueError):
    """A model description cannot be turned into a consistent graph."""


class FormatError(HierlightError, ValueError):
    """A weights file is corrupt or does not match the expected layout."""

    def __init__(self, message, offset=None, tensor=None):
        self.offset = offset
        self.tensor = tensor
        parts = []
        if offset is not None:
            parts.append(f"offset {offset}")
        if tensor is not None:
            parts.append(f"tensor {tensor!r}")
        prefix = f"[{', '.join(parts)}] " if parts else ""
        super().__init__(prefix + message)


class ConsistencyError(HierlightError, ValueError):
    """Weights and graph disagree."""


class InputError(HierlightError, ValueError):
    """Unusable image input; `offset` locates the problem inside a file."""

    def __init__(self, message, offset=None):
        self.offset = offset
        super().__init__(message if offset is None else f"byte {offset}: {message}")
