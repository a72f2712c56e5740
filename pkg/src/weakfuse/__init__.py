"""Semiparametric one-step estimation fusing aligned and weakly aligned
data sources with parametric conditional-density shifts."""

from . import errors
from .betafit import (
    InformationMatrix,
    MomentMatchResult,
    OneStepBeta,
    efficient_score,
    information_matrix,
    moment_match_beta,
    one_step_beta,
)
from .estimator import (
    EstimateReport,
    EstimatorVariant,
    apply_variant,
    one_step_estimate,
    sensitivity_interval,
    wald_interval,
)
from .gradients import (
    EstimandSpec,
    FusionMatrix,
    GradientSeed,
    canonical_gradient_fixed_beta,
    compute_pass,
    efficient_gradient,
    fusion_matrix,
    gamma_derivative,
    gradient_aligned_only,
    gradient_known_beta,
    lambda_dagger,
    seed_gradient,
)
from .model import (
    BetaParam,
    Dataset,
    FusionDesign,
    Observation,
    ValidationReport,
    assemble_beta,
    beta_slice,
    estimable_mask,
    layout_from_design,
    validate_design,
)
from .nuisance import (
    BandwidthRule,
    DiscretePanel,
    FittedNuisance,
    KernelPanel,
    NuisanceOptions,
    conditional_mean,
    fit_kernel_regression,
    fit_marginal_density_ratio,
    fit_nuisance_bundle,
    fit_propensity,
)
from .simulation import (
    ALIGNMENT_LEVELS,
    Scenario,
    SummaryRow,
    generate_dataset,
    named_scenario,
    run_monte_carlo,
    study_design,
    summary_to_csv,
    true_parameters,
)
from .weights import (
    BasisTerm,
    NormalizerEstimate,
    WeightSpec,
    basis_matrix,
    complex_family,
    density_ratio,
    estimate_normalizer,
    eval_weight,
    eval_weight_logderiv,
    eval_weight_many,
    parse_term,
)

__version__ = "0.1.0"

__all__ = [
    "ALIGNMENT_LEVELS",
    "BandwidthRule",
    "BasisTerm",
    "BetaParam",
    "Dataset",
    "DiscretePanel",
    "EstimandSpec",
    "EstimateReport",
    "EstimatorVariant",
    "FittedNuisance",
    "FusionDesign",
    "FusionMatrix",
    "GradientSeed",
    "InformationMatrix",
    "KernelPanel",
    "MomentMatchResult",
    "NormalizerEstimate",
    "NuisanceOptions",
    "Observation",
    "OneStepBeta",
    "Scenario",
    "SummaryRow",
    "ValidationReport",
    "apply_variant",
    "assemble_beta",
    "basis_matrix",
    "beta_slice",
    "canonical_gradient_fixed_beta",
    "complex_family",
    "compute_pass",
    "conditional_mean",
    "density_ratio",
    "efficient_gradient",
    "efficient_score",
    "errors",
    "estimable_mask",
    "estimate_normalizer",
    "eval_weight",
    "eval_weight_logderiv",
    "eval_weight_many",
    "fit_kernel_regression",
    "fit_marginal_density_ratio",
    "fit_nuisance_bundle",
    "fit_propensity",
    "fusion_matrix",
    "gamma_derivative",
    "generate_dataset",
    "gradient_aligned_only",
    "gradient_known_beta",
    "information_matrix",
    "lambda_dagger",
    "layout_from_design",
    "moment_match_beta",
    "named_scenario",
    "one_step_beta",
    "one_step_estimate",
    "parse_term",
    "run_monte_carlo",
    "seed_gradient",
    "sensitivity_interval",
    "study_design",
    "summary_to_csv",
    "true_parameters",
    "validate_design",
    "wald_interval",
]
