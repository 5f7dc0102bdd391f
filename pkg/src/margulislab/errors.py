"""Exception types shared across the laboratory."""


class MargulisLabError(Exception):
    """Base class for all laboratory errors."""


class InvalidDescriptor(MargulisLabError):
    """Map descriptor fails validation (e.g. roof function not positive)."""


class NoConvergence(MargulisLabError):
    """An iterative scheme failed to reach its residual tolerance."""

    def __init__(self, message, stage=None, residual=None):
        super().__init__(message)
        self.stage = stage
        self.residual = residual


class NotApplicable(MargulisLabError):
    """Operation requested for a map family it is not defined on."""


class NoIntersection(MargulisLabError):
    """A stable leaf misses the target chart within the allowed distance."""


class OutOfChart(MargulisLabError):
    """Requested subset lies outside the chart extents."""


class DegenerateCell(MargulisLabError):
    """A pushed holonomy cell collapsed below the area floor."""


class RefinementBudgetExceeded(MargulisLabError):
    """Adaptive refinement hit its node budget before reaching tolerance."""


class CompactLeafConflict(MargulisLabError):
    """Base chart meets a flagged compact center leaf (periodic flow orbit)."""


class ZeroMassCell(MargulisLabError):
    """A conditional cell mass underflowed to zero."""


class NotIrreducible(MargulisLabError):
    """Recurrent core extraction of a box transition matrix failed."""


class UnboundedWc(MargulisLabError):
    """No decay-rate sign change along the center leaf within the search window."""


class CoverGap(MargulisLabError):
    """Chart cover misses a positive-volume region of the manifold."""


class ConfigError(MargulisLabError):
    """Experiment configuration failed to parse or validate."""
