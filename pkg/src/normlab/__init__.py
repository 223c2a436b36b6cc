"""Toy transformer laboratory for attention normalisation placement.

Modules: ``tensor`` (autodiff), ``attention`` (heads and perturbation
analysis), ``task`` (addition data), ``model``, ``checkpoint``, ``trainer``,
``experiments`` and ``cli``.
"""

from .attention import HeadWeights, NormStrategy
from .model import ModelConfig, ModelState, calibrate, forward, init, model_preset
from .task import TaskConfig, preset
from .trainer import TrainConfig, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "HeadWeights",
    "NormStrategy",
    "ModelConfig",
    "ModelState",
    "TaskConfig",
    "TrainConfig",
    "calibrate",
    "evaluate",
    "forward",
    "init",
    "model_preset",
    "preset",
    "train",
]
