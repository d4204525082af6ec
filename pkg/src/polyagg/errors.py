class MeshError(ValueError):
    """Invalid mesh data (bad index, orientation, degenerate cell)."""

    def __init__(self, message, cell=None):
        super().__init__(message)
        self.cell = cell


class MeshFormatError(MeshError):
    """Malformed mesh file."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line
        self.cell = None


class GraphError(ValueError):
    """Invalid graph or partition input."""


class ModelFormatError(ValueError):
    """Malformed, truncated or incompatible model file."""


class NumericalError(ArithmeticError):
    """Non-finite values encountered during a numerical computation."""

    def __init__(self, message, where=None):
        if where is not None:
            message = f"{where}: {message}"
        super().__init__(message)
        self.where = where
