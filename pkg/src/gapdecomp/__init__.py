"""Distributional gap decompositions that keep observations outside the
common covariate support."""

__version__ = "0.1.0"

from .data import (  # noqa: E402
    ColumnMapping,
    EvaluationGrid,
    GridPolicy,
    Observation,
    ObservationTable,
    load_table,
    make_grid,
    weighted_cdf,
    weighted_ecdf,
    write_table,
)
from .decompose import (  # noqa: E402
    DecompositionCurves,
    PropensityConfig,
    Selector,
    contribution_shares,
    decompose_conventional,
    decompose_relaxed,
    dfl_counterfactual,
    fit_group_models,
    theta,
)
from .distreg import (  # noqa: E402
    ConditionalCdf,
    CovariateTransform,
    SolverConfig,
    TransformSpec,
    fit_conditional_cdf,
    predict,
    rearrange,
)
from .support import SupportPartition, SupportStrategy, estimate_partition, region_masses  # noqa: E402
from .synth import DgpSpec, generate, oracle_decompose  # noqa: E402
