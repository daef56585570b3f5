"""aggcate: target-population treatment effects from aggregate trial data.

Pipeline: load aggregate trial summaries (effect estimates + covariate
moments), solve per-trial exponential-tilting weights over a base
covariate sample, fit a parametric CATE function by GMM on the stacked
moment equations, and marginalize the fitted CATE over a target-population
covariate sample with plug-in standard errors.
"""

from .aggdata import (CovariateSample, CovariateSchema, EffectEstimate,
                      MetaDataset, MomentSpec, MomentSummary,
                      load_covariate_sample, load_meta_dataset, load_schema,
                      risk_difference_from_counts)
from .cate import CustomCate, LinearCate, TimeStratifiedCate, \
    build_time_stratified
from .errors import (AggcateError, DataValidationError,
                     InfeasibleMomentsError, MaxIterationsError,
                     NumericalError, RankDeficiencyError)
from .estimands import (TransportResult, indirect_comparison, subgroup_ate,
                        transport_ate, transport_relative)
from .gmm import CateFit, MomentSystem, build_system, compute_jacobians, fit
from .inference import (TrialCovariances, VarianceReport, assemble_variance,
                        default_trial_covariances, wald_ci)
from .synthpop import CopulaSpec, Marginal, fit_spec_from_summaries, sample
from .tilting import TiltFit, evaluate_relative_representers, \
    evaluate_representers, solve_all_tilts, solve_tilt

__version__ = "0.1.0"

__all__ = [
    "AggcateError", "CateFit", "CopulaSpec", "CovariateSample",
    "CovariateSchema", "CustomCate", "DataValidationError", "EffectEstimate",
    "InfeasibleMomentsError", "LinearCate", "MaxIterationsError",
    "MetaDataset", "MomentSpec", "MomentSummary", "MomentSystem",
    "Marginal", "NumericalError", "RankDeficiencyError", "TiltFit",
    "TimeStratifiedCate", "TransportResult", "TrialCovariances",
    "VarianceReport", "assemble_variance", "build_system",
    "build_time_stratified", "compute_jacobians",
    "default_trial_covariances", "evaluate_relative_representers",
    "evaluate_representers", "fit", "fit_spec_from_summaries",
    "indirect_comparison", "load_covariate_sample", "load_meta_dataset",
    "load_schema", "risk_difference_from_counts", "sample", "solve_all_tilts",
    "solve_tilt", "subgroup_ate", "transport_ate", "transport_relative",
    "wald_ci",
]
