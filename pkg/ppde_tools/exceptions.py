"""Error hierarchy shared by every module of the package."""


class PPDEError(Exception):
    """Base class for all errors raised by ppde_tools."""


class DomainError(PPDEError, ValueError):
    """A time, state or value lies outside its admissible set."""


class DomainEscapeError(DomainError):
    """A Picard iterate left the domain D by more than the tolerance."""

    def __init__(self, message, iteration=None, time=None, value=None):
        super().__init__(message)
        self.iteration = iteration
        self.time = time
        self.value = value


class ShapeError(PPDEError, ValueError):
    """Grids or dimensions of two objects do not match."""


class SimulationError(PPDEError, ArithmeticError):
    """Numerical failure while simulating or averaging paths."""

    def __init__(self, message, time=None, path_index=None):
        super().__init__(message)
        self.time = time
        self.path_index = path_index


class ConfigurationError(PPDEError, ValueError):
    """Invalid experiment configuration; `problems` lists the offending keys."""

    def __init__(self, message, problems=None):
        self.problems = list(problems or [])
        if self.problems:
            message = message + '\n' + '\n'.join(f'  - {p}' for p in self.problems)
        super().__init__(message)


class ExpressionError(ConfigurationError):
    """An expression in a config could not be parsed or compiled."""


class ContractError(PPDEError, AssertionError):
    """A user-supplied functional broke its contract (e.g. non-anticipation)."""
