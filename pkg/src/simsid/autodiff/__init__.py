from . import ops
from .gradcheck import grad_check, numerical_grad
from .nn import BatchNorm, Conv2d, Linear, Module
from .ops import PRIMITIVES, apply
from .optim import Adam, adam_step, cosine_lr
from .tensor import NonFiniteError, Parameter, ShapeError, Tensor, no_grad

__all__ = [
    "Adam",
    "BatchNorm",
    "Conv2d",
    "Linear",
    "Module",
    "NonFiniteError",
    "PRIMITIVES",
    "Parameter",
    "ShapeError",
    "Tensor",
    "adam_step",
    "apply",
    "cosine_lr",
    "grad_check",
    "no_grad",
    "numerical_grad",
    "ops",
]
