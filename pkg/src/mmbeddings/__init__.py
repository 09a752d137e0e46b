"""Categorical embeddings as random effects in a variational autoencoder,
with baseline encoders, a simulation generator and evaluation metrics."""

from .baselines import make_model, mean_encode
from .metrics import auc, fit_logistic, match_components, mse, rmse_d
from .simgen import SimConfig, simulate, simulate_test
from .trainer import TrainConfig, extract_embeddings, fine_tune_decoder, fit, predict, train
from .variational import CatFeatureSpec, MMbeddings, ModelConfig, count_parameters

__version__ = "0.1.0"

__all__ = [
    "CatFeatureSpec",
    "MMbeddings",
    "ModelConfig",
    "SimConfig",
    "TrainConfig",
    "auc",
    "count_parameters",
    "extract_embeddings",
    "fine_tune_decoder",
    "fit",
    "fit_logistic",
    "make_model",
    "match_components",
    "mean_encode",
    "mse",
    "predict",
    "rmse_d",
    "simulate",
    "simulate_test",
    "train",
]
