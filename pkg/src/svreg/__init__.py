"""Bayesian volatility regression for multi-subject functional data.

Fits group mean curves and subject deviation curves with integrated-Wiener-
process priors, infers subject-specific volatilities and their covariate
regression by MCMC, and ships the matching penalized-spline solver,
simulation designs and evaluation metrics.
"""

from .data import Dataset, Subject, ingest
from .gp_kernels import (GPModel, ObsPoint, Target, direct_gp_posterior, gram,
                         green_kernel, null_kernel, poly_basis)
from .sampler import (ChainData, ChainState, ModelConfig, PosteriorDraws,
                      hpd_interval, kde_mode, run_chain, summarize)
from .simulate import (SimTruth, ase_logvol, ase_trajectory, empirical_volatility,
                       gen_case1, gen_case2, se_beta, simulate_iwp, two_stage_beta)
from .smoother import (LinearGaussianSSM, ObsRow, SmootherOutput, kalman_filter,
                       kalman_smooth, simulation_smoother)
from .spline import SplineFit, backfit, dpss_objective, fitted_values, gcv_score, ncs_fit
from .statespace import Transition, make_transition, process_noise, transition_matrix

__all__ = [
    "Dataset", "Subject", "ingest",
    "GPModel", "ObsPoint", "Target", "direct_gp_posterior", "gram",
    "green_kernel", "null_kernel", "poly_basis",
    "ChainData", "ChainState", "ModelConfig", "PosteriorDraws",
    "hpd_interval", "kde_mode", "run_chain", "summarize",
    "SimTruth", "ase_logvol", "ase_trajectory", "empirical_volatility",
    "gen_case1", "gen_case2", "se_beta", "simulate_iwp", "two_stage_beta",
    "LinearGaussianSSM", "ObsRow", "SmootherOutput", "kalman_filter",
    "kalman_smooth", "simulation_smoother",
    "SplineFit", "backfit", "dpss_objective", "fitted_values", "gcv_score", "ncs_fit",
    "Transition", "make_transition", "process_noise", "transition_matrix",
]

__version__ = "0.1.0"
