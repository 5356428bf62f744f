"""Smoothed inference for adversarially trained noisy classifiers, in numpy."""
from . import attacks, checkpoint, config, data, engine, harness, noise, smoothing, training
from .attacks import AttackConfig
from .errors import ConfigError, InputError, NumericError, ParseError, SmoothInfError
from .noise import NoiseDraw, NoiseSpec
from .smoothing import SmoothingConfig, smooth_predict
from .training import TrainConfig

__version__ = "0.1.0"

__all__ = [
    "AttackConfig", "ConfigError", "InputError", "NoiseDraw", "NoiseSpec", "NumericError",
    "ParseError", "SmoothInfError", "SmoothingConfig", "TrainConfig", "attacks", "checkpoint",
    "config", "data", "engine", "harness", "noise", "smooth_predict", "smoothing", "training",
]
