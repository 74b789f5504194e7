from . import ops
from .checkpoint import CheckpointError
from .kernels import BACKEND
from .optim import Adam, NonFiniteGradient, clip_global_norm, global_norm
from .tensor import (
    ShapeError,
    Tape,
    Tensor,
    as_tensor,
    backward,
    get_default_dtype,
    parameter,
    recording,
    set_check_finite,
    set_default_dtype,
)

__all__ = [
    "Adam", "BACKEND", "CheckpointError", "NonFiniteGradient", "ShapeError", "Tape",
    "Tensor", "as_tensor", "backward", "clip_global_norm", "get_default_dtype",
    "global_norm", "ops", "parameter", "recording", "set_check_finite",
    "set_default_dtype",
]
