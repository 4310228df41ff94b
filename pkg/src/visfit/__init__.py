"""Visibility-aware dense body fitting on a numpy body model.

Covers the per-axis heatmap codec, visibility labels from z-buffer and
dense-UV correspondence, the training and fitting losses with analytic
gradients, Adam-based model fitting, and pose metrics.
"""
from .body_model import BodyModel, ModelValidationError, PosedBody, forward, forward_with_vjp, load_model, save_model
from .evaluation import MetricsReport, mpjpe, mpve, pa_mpjpe, procrustes_align, visibility_accuracy
from .fitter import FitConfig, FitProblem, FitResult, fit, init_params
from .heatmaps import CropBox, HeatmapGrid, PerspectiveCamera, encode_target, soft_argmax, to_grid
from .mini_model import make_mini_model
from .objectives import LossWeights, total_fit_objective
from .observations import Observations, load_observations, save_observations
from .prior import GMMPrior, gmm_nll, load_prior, make_synthetic_prior
from .synth import SyntheticProblemSpec, make_problem
from .visibility import Correspondence, DenseUVMap, pixel_to_vertex, rasterize_zbuffer

__version__ = "0.1.0"

__all__ = [
    "BodyModel", "ModelValidationError", "PosedBody", "forward", "forward_with_vjp", "load_model", "save_model",
    "MetricsReport", "mpjpe", "mpve", "pa_mpjpe", "procrustes_align", "visibility_accuracy",
    "FitConfig", "FitProblem", "FitResult", "fit", "init_params",
    "CropBox", "HeatmapGrid", "PerspectiveCamera", "encode_target", "soft_argmax", "to_grid",
    "make_mini_model", "LossWeights", "total_fit_objective",
    "Observations", "load_observations", "save_observations",
    "GMMPrior", "gmm_nll", "load_prior", "make_synthetic_prior",
    "SyntheticProblemSpec", "make_problem",
    "Correspondence", "DenseUVMap", "pixel_to_vertex", "rasterize_zbuffer",
]
