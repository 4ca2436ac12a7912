"""Minimal dense-network engine: tensors, tape autodiff, SGD, checkpoints."""

from .autodiff import GradTape, Gradients, Node, TapeError, backward, detach
from .network import DenseNet, DimensionError, Layer, apply_sgd, forward, init_net, sgd_step
from .tensor import ParamTensor, ShapeError, params_digest

__all__ = [
    "DenseNet",
    "DimensionError",
    "GradTape",
    "Gradients",
    "Layer",
    "Node",
    "ParamTensor",
    "ShapeError",
    "TapeError",
    "apply_sgd",
    "backward",
    "detach",
    "forward",
    "init_net",
    "params_digest",
    "sgd_step",
]
