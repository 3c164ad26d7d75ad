"""Exception types raised across the package."""


class InvalidInputError(ValueError):
    pass


class ShapeError(ValueError):
    pass


class NumericError(FloatingPointError):
    """Raised when a non-finite value reaches a parameter update."""

    def __init__(self, message, tensor_name=None):
        super().__init__(message)
        self.tensor_name = tensor_name


class ParseError(ValueError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class ReportError(ValueError):
    pass


class MissingCheckpointError(FileNotFoundError):
    pass
