"""GP regression with EP-marginalized noise and signal variances."""

from .ep_engine import EPConfig, EPState, SiteSet, log_marginal_ep, run_ep
from .gp_exact import ExactGPModel
from .kernels import KernelParams, LatentKernels, cov_matrix, cross_cov, se_ard
from .predict import (
    latent_predictive,
    predict_state,
    predictive_log_density,
    predictive_y_mn,
    predictive_y_n,
)

__version__ = "0.1.0"

__all__ = [
    "EPConfig",
    "EPState",
    "ExactGPModel",
    "KernelParams",
    "LatentKernels",
    "SiteSet",
    "cov_matrix",
    "cross_cov",
    "latent_predictive",
    "log_marginal_ep",
    "predict_state",
    "predictive_log_density",
    "predictive_y_mn",
    "predictive_y_n",
    "run_ep",
    "se_ard",
    "__version__",
]
