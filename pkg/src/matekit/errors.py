"""Exception taxonomy for matekit.

Every data- or estimation-level failure raises a subclass of
:class:`MatekitError`, so callers (including the CLI) can distinguish usage
mistakes from problems in the data or the requested estimand.
"""


class MatekitError(Exception):
    """Base class for all matekit data and estimation errors."""


# ---------------------------------------------------------------------------
# panel construction


class UnbalancedPanel(MatekitError):
    """A unit is missing a period or has duplicate (unit, period) rows."""


class BadTreatmentCode(MatekitError):
    """A treatment code is negative, non-integer, or >= the declared count."""


class NonFiniteOutcome(MatekitError):
    """An outcome value is NaN or infinite."""


class TimeVaryingCovariate(MatekitError):
    """A covariate column varies within a unit across periods."""


class BadPeriodPair(MatekitError):
    """A period pair is out of range, equal, or wrongly ordered."""


# ---------------------------------------------------------------------------
# mover regression and decompositions


class RankDeficientDesign(MatekitError):
    """The differenced regression design matrix is not full column rank."""


class NoMovers(MatekitError):
    """The panel contains no unit that changes treatment."""


class MissingCell(MatekitError):
    """A mover/stayer cell with nonzero decomposition weight is empty."""


# ---------------------------------------------------------------------------
# propensity models


class EmptyStratum(MatekitError):
    """A score was requested at a covariate point with no fitted stratum."""


class ContinuousColumn(MatekitError):
    """A continuous covariate was passed where discrete strata are required."""


class Separation(MatekitError):
    """Choice-model coefficients diverged (quasi-complete separation)."""


class NoConvergence(MatekitError):
    """The choice-model fit hit the iteration cap before the gradient tolerance."""


class RankDeficientFeatures(MatekitError):
    """The choice-model feature matrix is not full column rank."""


# ---------------------------------------------------------------------------
# chains and support

class NoFeasibleChain(MatekitError):
    """No admissible chain connects the reference treatment to the target."""


class InfeasibleChain(MatekitError):
    """A requested chain uses a link that fails its support conditions."""


# ---------------------------------------------------------------------------
# weighting estimators


class DegenerateDenominator(MatekitError):
    """A weight denominator is effectively zero for a participating unit."""


class NotBinary(MatekitError):
    """An operation restricted to two treatments was called with more."""


class AssumptionNotAcknowledged(MatekitError):
    """An estimand needs an extra assumption the caller has not acknowledged."""


# ---------------------------------------------------------------------------
# moment combination


class RouteExplosion(MatekitError):
    """The route count exceeds the enumeration cap; raise it or restrict chains."""


class SingularSystem(MatekitError):
    """The route covariance has rank zero; no combination is possible."""


class SameRoute(MatekitError):
    """A pairwise comparison was requested between identical routes."""


# ---------------------------------------------------------------------------
# simulation lab


class InvalidSpec(MatekitError):
    """A data-generating-process spec is malformed or inconsistent."""


class InfiniteSupport(MatekitError):
    """Exact enumeration was requested over a non-discretized distribution."""
