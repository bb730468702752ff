"""Exception hierarchy shared by all modules."""


class QuasiTDError(Exception):
    """Base class for all errors raised by quasitd."""


class ConfigurationError(QuasiTDError, ValueError):
    """Invalid parameters or infeasible settings."""


class PreconditionError(QuasiTDError, ValueError):
    """A geometric or mathematical precondition of an operation is violated."""


class MeshError(QuasiTDError):
    """A mesh fails one of its structural invariants."""


class ParseError(QuasiTDError, ValueError):
    """Malformed input file.

    ``line`` and ``column`` are 1-based; either may be ``None`` when the
    location is unknown.
    """

    def __init__(self, message, line=None, column=None, source=None):
        self.message = message
        self.line = line
        self.column = column
        self.source = source
        loc = []
        if source is not None:
            loc.append(str(source))
        if line is not None:
            loc.append(f"line {line}")
        if column is not None:
            loc.append(f"column {column}")
        prefix = ", ".join(loc)
        super().__init__(f"{prefix}: {message}" if prefix else message)


class SolverError(QuasiTDError, RuntimeError):
    """A nonlinear or linear solve failed.

    ``history`` holds the residual norms recorded up to the failure.
    """

    def __init__(self, message, history=()):
        self.history = list(history)
        super().__init__(message)
