"""Euler approximations for SDEs driven by a Wiener process and an independent fBm (H > 1/2)."""

from .analysis import (
    CouplingPlan,
    ErrorReport,
    aggregate_increments,
    fit_rate,
    stochastic_derivative_product,
    strong_error,
    theoretical_rate,
)
from .model import ModelSpec, ProbeDomain, builtin_models, check_hypotheses, get_model
from .noise import (
    GridSpec,
    NoisePath,
    fbm_covariance,
    fgn_covariance,
    sample_noise_path,
)
from .scheme import Trajectory, euler_path, euler_step, interpolate, lamperti_transform

__version__ = "0.1.0"
