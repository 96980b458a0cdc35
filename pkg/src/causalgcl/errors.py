"""Exception types raised across the package."""


class CausalGCLError(Exception):
    """Base class for package errors."""


class ConfigError(CausalGCLError, ValueError):
    """Invalid or incomplete configuration."""


class ParseError(CausalGCLError, ValueError):
    def __init__(self, message, line=None, path=None):
        where = f"{path}:" if path else ""
        if line is not None:
            message = f"{where}line {line}: {message}"
        super().__init__(message)
        self.line = line
        self.path = path


class EmptyGraphError(CausalGCLError, ValueError):
    pass


class ShapeError(CausalGCLError, ValueError):
    pass


class SplitError(CausalGCLError, ValueError):
    pass


class GradientCheckError(CausalGCLError, ArithmeticError):
    def __init__(self, message, coordinate=None):
        super().__init__(message)
        self.coordinate = coordinate


class TrainingDivergedError(CausalGCLError, ArithmeticError):
    def __init__(self, message, step=None, epoch=None):
        super().__init__(message)
        self.step = step
        self.epoch = epoch


class StageError(CausalGCLError, RuntimeError):
    def __init__(self, stage, message, artifacts=()):
        super().__init__(f"stage {stage!r} failed: {message}" + (f" (artifacts: {', '.join(map(str, artifacts))})" if artifacts else ""))
        self.stage = stage
        self.artifacts = list(artifacts)
