"""Exception types shared across the planner.

The CLI maps these to exit codes: scenario problems exit 2, value-iteration
budget exhaustion exits 3, a stalled fleet simulation exits 4.
"""


class PlanningError(Exception):
    """Base class for all covplan errors."""


class ParameterError(PlanningError, ValueError):
    """A constructor or operation received an out-of-range parameter."""


class DomainError(PlanningError, ValueError):
    """A matrix argument is outside the operation's domain (not symmetric PSD, singular, ...)."""


class GeometryError(PlanningError, ValueError):
    """Degenerate sensing geometry, e.g. non-positive stereo disparity."""


class NotVisibleError(PlanningError):
    """The target is outside the sensor's validity region for the given pose."""


class ConvergenceError(PlanningError):
    """Value iteration exhausted its sweep budget.

    Carries the last sup-norm Bellman residual in ``residual``.
    """

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class CycleError(PlanningError):
    """A policy rollout revisited a state without reaching a fixed point.

    Diagnostic only: an exactly optimal stationary policy cannot cycle.
    """


class ClusterSizeError(PlanningError, ValueError):
    """Cluster exceeds the configured maximum number of targets."""


class TrainingError(PlanningError, ValueError):
    """Pixel-corrector training data is rank deficient or otherwise unusable."""


class ScenarioError(PlanningError, ValueError):
    """Scenario file is missing, malformed, or inconsistent.

    ``pointer`` holds a JSON-pointer-style path to the offending field.
    """

    def __init__(self, message, pointer=None):
        if pointer:
            message = f"{message} (at {pointer})"
        super().__init__(message)
        self.pointer = pointer


class StallError(PlanningError):
    """Fleet simulation made no progress for the configured guard window."""
