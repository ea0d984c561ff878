"""Small float64 neural-network engine with explicit backward passes."""
from .gradcheck import finite_diff_check, numeric_gradient, relative_error
from .kernels import BACKEND
from .layers import (AvgPool2x2, BatchNorm, Conv2D, Dense, Layer, LeakyReLU,
                     NearestUpsample2x, ReLU, Reshape, ShapeError, Tanh)
from .network import ForwardTrace, GradSet, Network, TraceMismatchError, backward, forward
from .optim import Adam, Optimizer, SGDMomentum, make_optimizer


def optimizer_step(optimizer, params, grads):
    return optimizer.step(params, grads)


__all__ = [
    "BACKEND", "AvgPool2x2", "BatchNorm", "Conv2D", "Dense", "Layer", "LeakyReLU",
    "NearestUpsample2x", "ReLU", "Reshape", "ShapeError", "Tanh", "ForwardTrace",
    "GradSet", "Network", "TraceMismatchError", "backward", "forward", "Adam",
    "Optimizer", "SGDMomentum", "make_optimizer", "optimizer_step",
    "finite_diff_check", "numeric_gradient", "relative_error",
]
