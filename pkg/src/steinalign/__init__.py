"""Stein-discrepancy estimators, calibrated tests and desk-scale domain adaptation."""

from .discrepancy import SteinEstimate, ksd_u_statistic, ksd_v_statistic, regularized_ksd, stein_kernel_u
from .kernels import KernelSpec
from .scores import GaussianModel, GmmModel, VaeModel, fit_gaussian, fit_gmm_em

__all__ = [
    "GaussianModel",
    "GmmModel",
    "KernelSpec",
    "SteinEstimate",
    "VaeModel",
    "fit_gaussian",
    "fit_gmm_em",
    "ksd_u_statistic",
    "ksd_v_statistic",
    "regularized_ksd",
    "stein_kernel_u",
]
