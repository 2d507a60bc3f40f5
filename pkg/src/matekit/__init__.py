"""Mover-design treatment effect estimation for longitudinal panels.

The package turns two-way mover regressions inside out: it decomposes
their coefficients into the difference-in-differences comparisons they
aggregate, re-weights those comparisons into mover average treatment
effects via chains of overlapping treatment pairs, and stacks alternative
chains into an efficient combination with a specification test. A
simulation laboratory with exactly enumerable population truths backs
every estimator.
"""

__version__ = "0.1.0"

from .chains import (
    Chain,
    SupportGraph,
    build_support_graph,
    chain_from_treatments,
    count_all_chains,
    enumerate_chains,
    export_dot,
)
from .errors import (
    AssumptionNotAcknowledged,
    BadPeriodPair,
    BadTreatmentCode,
    ContinuousColumn,
    DegenerateDenominator,
    EmptyStratum,
    InfeasibleChain,
    InfiniteSupport,
    InvalidSpec,
    MatekitError,
    MissingCell,
    NoConvergence,
    NoFeasibleChain,
    NoMovers,
    NonFiniteOutcome,
    NotBinary,
    RankDeficientDesign,
    RankDeficientFeatures,
    RouteExplosion,
    SameRoute,
    Separation,
    SingularSystem,
    TimeVaryingCovariate,
    UnbalancedPanel,
)
from .gmm import (
    EfficientEstimate,
    MomentSystem,
    PairwiseTest,
    build_moment_system,
    efficient_estimate,
    specification_test_pairwise,
)
from .mate import (
    KappaWeight,
    MateEstimate,
    MateEstimator,
    RhoWeight,
    compute_kappa_weights,
    compute_rho_weights,
    estimate_mate_corollary,
    estimate_mate_multiperiod,
    estimate_mate_prop3,
    estimate_mate_prop4,
)
from .moverreg import (
    Lemma1Decomposition,
    MoverRegression,
    MoverRegressionFit,
    Prop1Decomposition,
    Prop2Diagnostic,
    decompose_lemma1,
    decompose_prop1,
    diagnose_prop2,
    fit_mover_regression,
)
from .panel import (
    PanelDataset,
    PanelSchema,
    check_period_pair,
    check_treatment,
    classify_movers,
    first_difference,
    load_panel,
    panel_from_arrays,
    panel_from_dataframe,
    read_config,
)
from .propensity import (
    CellMeansPropensity,
    MultinomialLogitPropensity,
    ScoreView,
    fit_cell_means,
    fit_multinomial_logit,
    model_from_dict,
    trim,
)
from .simlab import (
    DgpSpec,
    MonteCarloResult,
    PopulationOracle,
    generate,
    monte_carlo,
    population_oracle,
)

__all__ = [name for name in dir() if not name.startswith("_")]
