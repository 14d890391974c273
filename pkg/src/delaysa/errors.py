"""Exception types shared across the package."""


class DelaySAError(Exception):
    """Base class for all errors raised by this package."""


class NonStochasticRow(DelaySAError):
    """A transition-matrix row does not sum to one."""


class Reducible(DelaySAError):
    """The transition graph is not strongly connected."""


class Periodic(DelaySAError):
    """The chain has period greater than one."""


class NoConvergence(DelaySAError):
    """An iterative solver exceeded its iteration cap."""


class CapExceeded(DelaySAError):
    """A mixing-time scan passed its power cap without certifying an answer."""


class DimensionMismatch(DelaySAError):
    """Vector or matrix shapes are inconsistent with the problem instance."""


class SingularSystem(DelaySAError):
    """The mean-field linear system is singular (strong monotonicity fails)."""


class MonotonicityViolation(DelaySAError):
    """The audited strong-monotonicity modulus is not positive."""


class TraceExhausted(DelaySAError):
    """A replayed delay trace is shorter than the requested horizon."""


class MissingIterates(DelaySAError):
    """The operation needs recorded iterates but the trace has none."""


class WindowTooSmall(DelaySAError):
    """Too few points above the noise floor to fit a decay rate."""


class AllDiverged(DelaySAError):
    """Every run in the ensemble diverged."""


class StepSizeTooLarge(DelaySAError):
    """The step size violates the precondition of the requested check."""


class ConfigInvalid(DelaySAError):
    """An experiment configuration failed validation."""
