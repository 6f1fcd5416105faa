"""Exception hierarchy. CLI exit codes hang off ``exit_code``."""


class JfsqError(Exception):
    exit_code = 1


class ConfigError(JfsqError, ValueError):
    exit_code = 2


class StateError(JfsqError, ValueError):
    exit_code = 2


class EstimationError(JfsqError):
    exit_code = 3


class ScaleError(JfsqError):
    exit_code = 4


class FitError(JfsqError):
    exit_code = 5


class NumericalError(JfsqError):
    def __init__(self, msg, residual=float("nan")):
        super().__init__(f"{msg} (residual={residual:.3e})")
        self.residual = residual


class InvariantViolation(JfsqError, RuntimeError):
    """Simulator reached a state its own bookkeeping says is impossible."""
