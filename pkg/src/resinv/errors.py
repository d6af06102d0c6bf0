"""Exception types shared across the package."""


class ResinvError(Exception):
    """Base class for all package errors."""


class ShapeError(ResinvError, ValueError):
    pass


class NonFiniteError(ResinvError, FloatingPointError):
    """A NaN or Inf surfaced in a public operation."""


class GradientError(ResinvError):
    """Raised for non-scalar losses and unreachable gradient requests."""


class ScheduleError(ResinvError, ValueError):
    pass


class ParamError(ResinvError, ValueError):
    """Out-of-range scene/identity parameters."""


class WeightFileError(ResinvError):
    """Malformed weight or trajectory container."""


class ConfigError(ResinvError):
    """Config parse or validation failure, with a location hint."""

    def __init__(self, message, *, field=None, line=None, column=None):
        self.field = field
        self.line = line
        self.column = column
        where = []
        if line is not None:
            where.append(f"line {line}")
            if column is not None:
                where.append(f"column {column}")
        if field is not None:
            where.append(f"field '{field}'")
        prefix = f"[{', '.join(where)}] " if where else ""
        super().__init__(prefix + message)


class DivergenceError(ResinvError, FloatingPointError):
    """Loss became non-finite during optimization."""

    def __init__(self, message, *, step=None, iteration=None):
        self.step = step
        self.iteration = iteration
        super().__init__(message)


class StageError(ResinvError):
    """A pipeline stage failed; partial results are kept for debugging."""

    def __init__(self, stage, cause, partial=None):
        self.stage = stage
        self.cause = cause
        self.partial = partial
        super().__init__(f"stage '{stage}' failed: {cause}")
