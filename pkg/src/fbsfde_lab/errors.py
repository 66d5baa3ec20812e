"""Exception types shared across the solvers."""


class FbsfdeLabError(Exception):
    """Base class for all errors raised by this package."""


class NonDivisibleHorizon(FbsfdeLabError):
    """A horizon (memory, terminal or anticipation) is not an integer multiple of the step."""


class RangeMismatch(FbsfdeLabError):
    """A norm range or process range does not fit inside the grid it is evaluated on."""


class NegativeLipschitz(FbsfdeLabError):
    """A Lipschitz constant was negative."""


class IndexOrder(FbsfdeLabError):
    """An index interval was given with start after end."""


class DimensionMismatch(FbsfdeLabError):
    """Coefficient / process dimensions are inconsistent."""


class NonFiniteState(FbsfdeLabError):
    """The forward recursion produced NaN or infinity.

    Carries the step index where the blow-up was detected.
    """

    def __init__(self, step_index, message=None):
        self.step_index = step_index
        super().__init__(message or f"non-finite state at step index {step_index}")


class ZeroDenominator(FbsfdeLabError):
    """A contraction ratio was requested for two identical inputs."""


class TooFewPaths(FbsfdeLabError):
    """Not enough Monte Carlo paths for the requested regression basis."""


class MissingFuture(FbsfdeLabError):
    """An anticipated generator needed future values that were not populated yet."""


class StabilityViolation(FbsfdeLabError):
    """The explicit backward step requires h * L < 1."""


class NonConvergence(FbsfdeLabError):
    """An iterative solve hit its iteration cap. Carries the diff history."""

    def __init__(self, message, history=None):
        self.history = history or []
        super().__init__(message)


class StepUnderflow(FbsfdeLabError):
    """Continuation step halving reached the minimum step without converging."""


class NotPositiveDefinite(FbsfdeLabError):
    """A matrix expected to be positive definite was not (within guard tolerance)."""


class MismatchedEnsemble(FbsfdeLabError):
    """A cost evaluation was given a policy and an ensemble of incompatible shapes."""


class OptimalityViolated(FbsfdeLabError):
    """A candidate optimal control lost against a perturbed control beyond noise.

    Carries the report with the offending perturbation.
    """

    def __init__(self, message, report=None):
        self.report = report
        super().__init__(message)


class UnsupportedKernel(FbsfdeLabError):
    """The deterministic reference integrator does not support this functional kind."""


class DepthExceeded(FbsfdeLabError):
    """Binomial tree depth above the enumerable limit."""


class OracleInapplicable(FbsfdeLabError):
    """No independent reference solution applies to this problem."""


class ConfigError(FbsfdeLabError):
    """A scenario configuration is invalid. Carries the dotted field path."""

    def __init__(self, field, message):
        self.field = field
        super().__init__(f"{field}: {message}")


class IllConditionedWarning(UserWarning):
    """A regression design matrix was numerically rank deficient and was resolved
    via the ridge floor and a singular-value cutoff."""
