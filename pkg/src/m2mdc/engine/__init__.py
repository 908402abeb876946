from .ops import (
    ShapeError,
    batchnorm2d,
    conv2d,
    cosine_similarity,
    cross_entropy,
    degenerate_cosine_count,
    global_avg_pool,
    linear,
    max_pool2d,
    relu,
    reset_degenerate_cosine_count,
    residual_add,
)
from .optim import NonFiniteGradient, OptimizerState, make_optimizer, optimizer_step
from .tensor import Tensor, grad_enabled, no_grad, tensor

__all__ = [
    "NonFiniteGradient",
    "OptimizerState",
    "ShapeError",
    "Tensor",
    "batchnorm2d",
    "conv2d",
    "cosine_similarity",
    "cross_entropy",
    "degenerate_cosine_count",
    "global_avg_pool",
    "grad_enabled",
    "linear",
    "make_optimizer",
    "max_pool2d",
    "no_grad",
    "optimizer_step",
    "relu",
    "reset_degenerate_cosine_count",
    "residual_add",
    "tensor",
]
