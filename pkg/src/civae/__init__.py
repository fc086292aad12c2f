"""Identifiable VAEs with samplewise-optimal encoder/posterior mixtures."""
from .gauss import DiagGaussian
from .kernels import BACKEND
from .models import CiModel, TrainConfig, build_model, train
from .objective import alpha_star_formula, alpha_star_grid, elbo_alpha, elbo_endpoint
from .synthdata import LabeledDataset

__all__ = [
    "BACKEND", "CiModel", "DiagGaussian", "LabeledDataset", "TrainConfig", "alpha_star_formula",
    "alpha_star_grid", "build_model", "elbo_alpha", "elbo_endpoint", "train",
]
__version__ = "0.1.0"
