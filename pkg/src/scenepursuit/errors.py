"""Exception and warning types shared across the package."""


class ScenePursuitError(Exception):
    """Base class for all package errors."""


class InvalidStrip(ScenePursuitError):
    """Boundary strip width is at least half the shorter table side."""


class IllegalEdge(ScenePursuitError):
    """Requested parent/child category pair is not a master-graph edge."""


class RetryExhausted(ScenePursuitError):
    """Overlap pruning did not converge within the retry cap."""


class Diverged(ScenePursuitError):
    """Stochastic-approximation parameters left the trust region."""


class NoConverge(ScenePursuitError):
    """Iterative scheme hit its iteration cap before the tolerance."""


class DegenerateData(ScenePursuitError):
    """Input data cannot identify the requested parameters."""


class DegenerateView(ScenePursuitError):
    """Camera translation is (numerically) parallel to the vertical axis."""


class SingularHomography(ScenePursuitError):
    """Plane-to-image map is numerically non-invertible."""


class BehindCamera(ScenePursuitError):
    """A projected point has non-positive depth."""


class ConfigError(ScenePursuitError):
    """Experiment configuration is missing or inconsistent."""


class NonIdentifiableWarning(UserWarning):
    """An edge type has too few attributed pairs for a reliable fit."""
