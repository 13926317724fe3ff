"""Desk-scale VAE-classifier with manifold mixup, trained end to end on CPU.

Everything is numpy float64 with a from-scratch reverse-mode autodiff engine;
results are deterministic given a seed. See the README for the CLI and the
per-module docstrings for conventions.
"""

from .autodiff import Rng, Tensor, no_grad
from .errors import (ConfigError, DatasetError, MixvaeError,
                     NonFiniteLossError, ShapeError, UsageError)
from .model import ModelConfig, VaeClassifier, b3_like, b4_like, desk_config

__version__ = "0.1.0"

__all__ = [
    "Rng", "Tensor", "no_grad",
    "ConfigError", "DatasetError", "MixvaeError", "NonFiniteLossError",
    "ShapeError", "UsageError",
    "ModelConfig", "VaeClassifier", "b3_like", "b4_like", "desk_config",
    "__version__",
]
