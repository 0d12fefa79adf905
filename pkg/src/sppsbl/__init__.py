"""Block-sparse signal recovery with a learned space-power coupling prior.

The solver family lives in :mod:`sppsbl.solver` (EM loop with per-edge
coupling weights; fixed-weight and zero-weight reductions give the PC-SBL
and classical SBL baselines).  :mod:`sppsbl.datagen` builds the synthetic
benchmark families, :mod:`sppsbl.metrics` scores recoveries, and
:mod:`sppsbl.bench` runs reproducible experiment grids.
"""

__version__ = "0.1.0"

from .model import (
    CouplingScheme,
    CouplingVector,
    HyperPriors,
    PrecisionField,
    SensingProblem,
    SolverState,
    build_coupling_matrix,
    prior_precisions,
)
from .posterior import (
    NumericalConditioningError,
    PosteriorMoments,
    compute_posterior,
    residual_stats,
)
from .solver import (
    InternalInvariantError,
    SolveResult,
    SolverConfig,
    run_em,
    solve_beta,
)
from .datagen import (
    ChainParams,
    GeneratedInstance,
    GenerationError,
    GeneratorSpec,
    HeteroscedasticParams,
    MultiPatternParams,
    derive_seed,
    generate,
)
from .metrics import TrialRecord, aggregate, correlation, extract_support, nmse, srr, success

__all__ = [
    "ChainParams",
    "CouplingScheme",
    "CouplingVector",
    "GeneratedInstance",
    "GenerationError",
    "GeneratorSpec",
    "HeteroscedasticParams",
    "HyperPriors",
    "InternalInvariantError",
    "MultiPatternParams",
    "NumericalConditioningError",
    "PosteriorMoments",
    "PrecisionField",
    "SensingProblem",
    "SolveResult",
    "SolverConfig",
    "SolverState",
    "TrialRecord",
    "aggregate",
    "build_coupling_matrix",
    "compute_posterior",
    "correlation",
    "derive_seed",
    "extract_support",
    "generate",
    "nmse",
    "prior_precisions",
    "residual_stats",
    "run_em",
    "solve_beta",
    "srr",
    "success",
    "__version__",
]
