"""Minimal float64 neural engine: layers, losses, optimizers, training."""

from .fast import FastInference
from .io import ModelFormatError, load_model, save_model
from .layers import ACTIVATIONS, LayerSpec, NnError, Param
from .losses import LOSSES, loss_and_grad
from .model import Sequential, build_model
from .optim import Adam, RMSProp, make_optimizer
from .train import TrainConfig, TrainHistory, TrainingError, train

__all__ = [
    "ACTIVATIONS",
    "Adam",
    "FastInference",
    "LOSSES",
    "LayerSpec",
    "ModelFormatError",
    "NnError",
    "Param",
    "RMSProp",
    "Sequential",
    "TrainConfig",
    "TrainHistory",
    "TrainingError",
    "build_model",
    "load_model",
    "loss_and_grad",
    "make_optimizer",
    "save_model",
    "train",
]
