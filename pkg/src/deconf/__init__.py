"""deconf: controlled simulation and benchmarking of penalized regression
under unobserved confounding (LASSO, PC-LASSO, PLMM)."""

from .confound import (
    ConfoundingDesign,
    Dataset,
    ScenarioParams,
    ScenarioSpec,
    UnsolvableScenarioError,
    absorb_z_covariance,
    build_design,
    compute_ratios,
    compute_tau,
    compute_var_psi,
    generate_dataset,
    generate_semisynthetic,
    signal_effect_exact,
    solve_scenario,
    tau_norm_closed_form,
)
from .solvers import (
    ConvergenceError,
    LassoPath,
    PlmmDecomposition,
    backend,
    blup_predict,
    compute_pcs,
    estimate_K,
    fit_null_variance_components,
    fitted_values,
    lasso_path,
    max_kkt_violation,
    pc_lasso_path,
    plmm_decomposition,
    plmm_path,
    rotate,
)
from .evaluation import (
    CvResult,
    MetricsSummary,
    aggregate_replications,
    cross_validate,
    estimation_errors,
    pauc,
    precision_curve,
)

__version__ = "0.1.0"

__all__ = [
    "ConfoundingDesign",
    "Dataset",
    "ScenarioParams",
    "ScenarioSpec",
    "UnsolvableScenarioError",
    "absorb_z_covariance",
    "build_design",
    "compute_ratios",
    "compute_tau",
    "compute_var_psi",
    "generate_dataset",
    "generate_semisynthetic",
    "signal_effect_exact",
    "solve_scenario",
    "tau_norm_closed_form",
    "ConvergenceError",
    "LassoPath",
    "PlmmDecomposition",
    "backend",
    "blup_predict",
    "compute_pcs",
    "estimate_K",
    "fit_null_variance_components",
    "fitted_values",
    "lasso_path",
    "max_kkt_violation",
    "pc_lasso_path",
    "plmm_decomposition",
    "plmm_path",
    "rotate",
    "CvResult",
    "MetricsSummary",
    "aggregate_replications",
    "cross_validate",
    "estimation_errors",
    "pauc",
    "precision_curve",
]
