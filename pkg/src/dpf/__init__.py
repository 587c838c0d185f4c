"""Differentiable particle filters."""

from .build import Model, build_model, frozen_baseline
from .config import ConfigError, ExperimentConfig, parse_config
from .engine import ParamStore, backward, derive_seed, grad_check, make_generator
from .estimator import ParticleFilterEstimator
from .filter import FilterOutput, ParticleEnsemble, ParticleFilter, run_filter
from .objectives import LossSpec, TrainingError, train
from .resampling import Resampler
from .ssm import LinearGaussianSSM, PlanarTask, PlanarWorld, kalman_filter

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "ExperimentConfig", "FilterOutput", "LinearGaussianSSM", "LossSpec", "Model",
    "ParamStore", "ParticleEnsemble", "ParticleFilter", "ParticleFilterEstimator", "PlanarTask",
    "PlanarWorld", "Resampler", "TrainingError", "backward", "build_model", "derive_seed",
    "frozen_baseline", "grad_check", "kalman_filter", "make_generator", "parse_config",
    "run_filter", "train",
]
