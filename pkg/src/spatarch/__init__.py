"""Estimation and simulation of log-squared spatiotemporal ARCH panel models."""

from .dgp import DgpConfig, TrueEffects, log_chi2_density, log_chi2_moments, model_config, simulate, spectral_radius
from .exceptions import SpatArchError
from .gmm import GmmResult, estimate_gmm
from .panel import Panel, StarPanel, build_projectors, log_square
from .qml import ParamVector, QmlResult, estimate_qml, jackknife_bias_correct
from .weights import WeightMatrix, build_lattice_queen, log_det_spatial, row_normalize

__version__ = "0.1.0"

__all__ = [
    "DgpConfig",
    "TrueEffects",
    "simulate",
    "log_chi2_density",
    "log_chi2_moments",
    "model_config",
    "spectral_radius",
    "SpatArchError",
    "GmmResult",
    "estimate_gmm",
    "Panel",
    "StarPanel",
    "build_projectors",
    "log_square",
    "ParamVector",
    "QmlResult",
    "estimate_qml",
    "jackknife_bias_correct",
    "WeightMatrix",
    "build_lattice_queen",
    "row_normalize",
    "log_det_spatial",
]
