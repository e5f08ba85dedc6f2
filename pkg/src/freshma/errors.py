"""Exception hierarchy shared by the analytic modules, the simulator and the CLI."""


class FreshmaError(Exception):
    """Base class for every error raised by this package."""


class InvalidParameterError(FreshmaError, ValueError):
    pass


class ModelConstructionError(FreshmaError):
    """A chain or kernel violated a structural invariant while being built."""


class ReducibleChainError(ModelConstructionError):
    pass


class StateSpaceTooLargeError(ModelConstructionError):
    pass


class InfeasibleParametersError(FreshmaError):
    """Parameters fall outside a stability / feasibility bound.

    ``bound`` names the violated condition so the CLI can cite it.
    """

    def __init__(self, message, bound=None):
        super().__init__(message)
        self.bound = bound


class ConvergenceError(FreshmaError):
    def __init__(self, message, residual=None, iterations=None):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations


class ConfigError(InvalidParameterError):
    """Malformed configuration file.

    ``line`` is the 1-based line of a parse error and ``key_path`` the dotted
    path of a schema violation, when known.
    """

    def __init__(self, message, line=None, key_path=None):
        super().__init__(message)
        self.line = line
        self.key_path = key_path
