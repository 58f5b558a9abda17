from . import tape
from .gradcheck import grad_check, numeric_grad, relative_error, tape_grad
from .ops import (
    DegenerateFeatureWarning,
    cosine,
    cross_entropy,
    linear,
    mean_pool,
    mse,
    relu,
    softmax,
)
from .tape import Tape, Var

__all__ = [
    "DegenerateFeatureWarning",
    "Tape",
    "Var",
    "cosine",
    "cross_entropy",
    "grad_check",
    "linear",
    "mean_pool",
    "mse",
    "numeric_grad",
    "relative_error",
    "relu",
    "softmax",
    "tape",
    "tape_grad",
]
