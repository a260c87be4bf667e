from .tensor import Tensor, as_tensor, no_grad
from .functional import (
    concat,
    conv3d,
    dense,
    global_avg_pool,
    maxpool3d,
    relu,
    reshape,
    weighted_cross_entropy,
)
from .optim import SGD, Adam

__all__ = [
    "Tensor",
    "as_tensor",
    "no_grad",
    "conv3d",
    "relu",
    "maxpool3d",
    "global_avg_pool",
    "dense",
    "concat",
    "reshape",
    "weighted_cross_entropy",
    "SGD",
    "Adam",
]
