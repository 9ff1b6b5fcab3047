"""Exception types shared across the package."""


class SupersegError(Exception):
    """Base class for all errors raised by superseg."""


class ShapeError(SupersegError):
    """Operands have incompatible shapes."""


class PlyParseError(SupersegError):
    """A PLY file could not be parsed."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class ConfigError(SupersegError):
    """Invalid or inconsistent run configuration."""


class EmptyPromptError(SupersegError):
    """A box/mask prompt selects no points."""


class TemplateError(SupersegError):
    """Instruction template violates the placeholder contract."""


class SegTokenError(SupersegError):
    """[SEG] appeared as the first output token; no preceding hidden state."""


class EmptySoftmaxRowError(SupersegError):
    """A softmax row contained only -inf entries."""


class NoDetectionError(SupersegError):
    """A box was requested for an empty mask."""


class TrainingDivergedError(SupersegError):
    """A loss became non-finite during optimization."""
