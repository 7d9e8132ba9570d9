"""Exception types raised by dynrcm."""


class ParameterError(ValueError):
    """Invalid input parameter (bad distribution, out-of-range size, ...)."""


class SolverError(RuntimeError):
    """A linear solve that should be well posed turned out singular."""


class ExplosionError(RuntimeError):
    """A walker exceeded the configured jump cap within its horizon."""


class ConsistencyError(ValueError):
    """Objects that must refer to the same environment do not."""
