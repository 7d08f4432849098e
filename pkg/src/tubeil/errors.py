"""Exception types shared across the package."""


class TubeILError(Exception):
    """Base class for all package errors."""


class NonFinite(TubeILError):
    """Numerical blow-up: a state or iterate became NaN/Inf."""


class SingularAllocation(TubeILError):
    pass


class DimensionMismatch(TubeILError, ValueError):
    pass


class EmptyResult(TubeILError):
    """A set operation produced an empty set."""


class Overflow(TubeILError):
    pass


class SingularKkt(TubeILError):
    pass


class NoConvergence(TubeILError):
    pass


class Infeasible(TubeILError):
    pass


class QpFailure(TubeILError):
    pass


class ConfigError(TubeILError, ValueError):
    pass


class NewtonDivergence(TubeILError):
    pass


class WeakComplementarity(TubeILError):
    """Strict complementarity fails at the solution; the fixed-active-set
    tangential predictor is not valid there."""


class InfeasibleTask(TubeILError):
    pass


class EpisodeDiverged(TubeILError):
    pass
