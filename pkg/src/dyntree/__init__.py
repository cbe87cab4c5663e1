"""Sequential Bayesian trees for regression, classification, selection,
sensitivity analysis, and expected-improvement tuning."""

from .model import (
    KIND_CATEGORICAL,
    KIND_ORDINAL,
    LEAF_CONSTANT,
    LEAF_LINEAR,
    LEAF_MULTINOMIAL,
    ModelSpec,
    TreePrior,
    spec_from_data,
)
from .tree import (
    SplitRule,
    apply_grow,
    apply_prune,
    enumerate_grow_moves,
    leaf_for,
    node_box,
    p_split,
    tree_log_prior,
)
from .leaves import (
    ConstantStats,
    LinearStats,
    MultinomialStats,
    PredictiveMoments,
    leaf_log_marginal,
    log_predictive,
    merge_stats,
    predictive_moments,
    update_stats,
)
from .smc import (
    ParticleCloud,
    bayes_factor,
    fit_cloud,
    init_cloud,
    log_marginal,
    prior_split_simulation,
    run_repetitions,
)
from .varsel import (
    RelevanceReport,
    backward_select,
    delta_node,
    importance,
    linear_leaf_variance_integral,
    quad_box_integral,
    relevance,
)
from .sensitivity import (
    MainEffectCurves,
    Margin,
    SensitivityResult,
    UncertaintyDist,
    categorical,
    fixed,
    function_sensitivity,
    lhs_design,
    main_effects,
    mix_design,
    sensitivity_indices,
    uniform,
)
from .optimize import (
    CandidatePool,
    FunctionObserver,
    OptimizationResult,
    ReplayObserver,
    expected_improvement,
    maxmin_subsample,
    sequential_optimize,
)
from .data import (
    Column,
    ColumnSchema,
    Dataset,
    augment_indicator,
    load_dataset,
    load_schema,
)

__version__ = "0.1.0"
