"""Detect single-variable perturbations between two groups of correlation matrices."""
__version__ = "0.1.0"

from .corrmat import (
    TwoGroupSample,
    check_correlation,
    corr_covariance,
    effective_df,
    fisher_z,
    group_average,
    scale_to_correlation,
    unvectorize,
    vectorize,
)
from .estimate import FitConfig, FitResult, build_weights, fit, minimize_alpha
from .infer import (
    bh_adjust,
    gee_covariance,
    jackknife,
    mass_univariate,
    median_center,
    power_comparison,
    wald_inference,
)
from .link import get_link, identifiability_check, psd_margin
from .simulate import SimParams, experiment_driver, gen_parameters, gen_samples, make_rng, parametric_bootstrap
