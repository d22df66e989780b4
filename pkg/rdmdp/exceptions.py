"""Exception hierarchy for rdmdp."""

from agent_utilities.core.exceptions import ParameterError


class RdmdpError(Exception):
    """Base class for all rdmdp failures."""


class DomainError(RdmdpError, ValueError):
    """Argument outside the mathematical domain of a model function."""


class MarginalOutOfRange(DomainError):
    """A tilted product-measure marginal left the open interval (0, 1)."""


class GridMismatch(RdmdpError, ValueError):
    """Two field grids do not share resolution, dimension or time slices."""


class InternalError(RdmdpError):
    """A guarded numerical routine failed where the mathematics says it cannot."""


class SimulationError(RdmdpError):
    """Integrity failure inside the event loop."""


class RateOverflow(SimulationError):
    """A tilted rate exceeded its precomputed thinning bound."""


class DriftDetected(SimulationError):
    """An incrementally maintained sum drifted away from its full recomputation."""


class ConfigError(ParameterError):
    """Invalid run configuration or experiment file."""
