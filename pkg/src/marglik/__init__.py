"""Marginal likelihood estimation for hierarchical models by importance sampling squared."""

from .core import NumericalError, RngStream, log_mean_exp, log_sum_exp, normalized_weight_moments
from .is2 import Is2Result, WeightedDraws, bootstrap_se, compare_models, posterior_expectation, run_is2
from .likeest import LikelihoodEstimate, ParticlePolicy, estimate_loglik, jackknife_gamma2
from .models import Dataset, SubjectData, build_model
from .proposal import (
    GaussianMixtureProposal,
    PosteriorDraws,
    fit_laplace_re_proposals,
    fit_re_proposals,
    fit_theta_mixture,
)

__version__ = "0.1.0"

__all__ = [
    "NumericalError", "RngStream", "log_mean_exp", "log_sum_exp", "normalized_weight_moments",
    "Is2Result", "WeightedDraws", "bootstrap_se", "compare_models", "posterior_expectation", "run_is2",
    "LikelihoodEstimate", "ParticlePolicy", "estimate_loglik", "jackknife_gamma2",
    "Dataset", "SubjectData", "build_model", "GaussianMixtureProposal", "PosteriorDraws",
    "fit_laplace_re_proposals", "fit_re_proposals", "fit_theta_mixture",
]
