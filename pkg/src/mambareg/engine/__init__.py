from . import ops
from .gradcheck import finite_difference_check
from .optim import Adam, adam_init, adam_step
from .scan import linear_recurrence
from .tensor import (
    NumericError,
    ShapeError,
    Tensor,
    as_tensor,
    gradients,
    parallel_map,
    parameter,
)
from .warp import warp3d

__all__ = [
    "Adam",
    "NumericError",
    "ShapeError",
    "Tensor",
    "adam_init",
    "adam_step",
    "as_tensor",
    "finite_difference_check",
    "gradients",
    "linear_recurrence",
    "ops",
    "parallel_map",
    "parameter",
    "warp3d",
]
