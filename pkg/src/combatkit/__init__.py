"""Sitewise harmonization of per-region brain metrics.

Fit a reference site once, then map any moving site onto it region by
region, with ridge shrinkage toward the reference curve for small samples.
Location/scale and empirical-Bayes pooled baselines, a synthetic cohort
generator, and an experiment harness live alongside the core fit/apply API.
"""

from .baselines import (
    FLAVOR_EB,
    FLAVOR_LS,
    EBHyperparams,
    PooledModel,
    apply_combat,
    fit_eb_combat,
    fit_ls_combat,
)
from .basis import (
    build_basis,
    design_matrix,
    expand_basis,
    fit_standardization,
    monomial_exponents,
)
from .errors import (
    AlignmentError,
    CombatError,
    ConvergenceFailure,
    CovariateMismatch,
    DegenerateVariance,
    InsufficientData,
    InsufficientRegions,
    RegionMismatch,
    SchemaError,
    SingularDesign,
    UnknownRegion,
    UnknownSite,
)
from .evaluate import (
    ExperimentReport,
    rmse_to_truth,
    run_age_window_curve,
    run_bias_grid,
    run_nu_sweep,
    run_sample_size_curve,
)
from .harmonize import (
    RectifiedResiduals,
    TuneDiagnostics,
    apply,
    auto_tune,
    bhattacharyya_gaussian,
    fit_bundle,
    fit_moving,
    fit_reference,
    harmonize_dataset,
    qc_bhattacharyya,
    rectify,
)
from .synth import (
    BiasSpec,
    GeneratorSpec,
    GroundTruth,
    RegionCurve,
    bias_ground_truth,
    default_reference_spec,
    generate_reference,
    inject_bias,
    preset_biases,
    sample_restricted,
)
from .types import (
    AutoTuneConfig,
    BasisSpec,
    CovariateVector,
    HarmonizationBundle,
    Hyperparameters,
    RegionModel,
    SiteDataset,
    SubjectRecord,
)

__version__ = "0.1.0"

__all__ = [
    "AlignmentError",
    "AutoTuneConfig",
    "BasisSpec",
    "BiasSpec",
    "CombatError",
    "ConvergenceFailure",
    "CovariateMismatch",
    "CovariateVector",
    "DegenerateVariance",
    "EBHyperparams",
    "ExperimentReport",
    "FLAVOR_EB",
    "FLAVOR_LS",
    "GeneratorSpec",
    "GroundTruth",
    "HarmonizationBundle",
    "Hyperparameters",
    "InsufficientData",
    "InsufficientRegions",
    "PooledModel",
    "RectifiedResiduals",
    "RegionCurve",
    "RegionMismatch",
    "RegionModel",
    "SchemaError",
    "SingularDesign",
    "SiteDataset",
    "SubjectRecord",
    "TuneDiagnostics",
    "UnknownRegion",
    "UnknownSite",
    "apply",
    "apply_combat",
    "auto_tune",
    "bhattacharyya_gaussian",
    "bias_ground_truth",
    "build_basis",
    "default_reference_spec",
    "design_matrix",
    "expand_basis",
    "fit_bundle",
    "fit_eb_combat",
    "fit_ls_combat",
    "fit_moving",
    "fit_reference",
    "fit_standardization",
    "generate_reference",
    "harmonize_dataset",
    "inject_bias",
    "monomial_exponents",
    "preset_biases",
    "qc_bhattacharyya",
    "rectify",
    "rmse_to_truth",
    "run_age_window_curve",
    "run_bias_grid",
    "run_nu_sweep",
    "run_sample_size_curve",
    "sample_restricted",
]
