from .tensor import (
    Tensor,
    Tape,
    TapeMismatchError,
    NonFiniteError,
    ShapeError,
    backward,
    no_tape,
)
from . import ops
from . import nn
from .rng import spawn_rng, derive_seed
from .gradcheck import finite_diff_check, GradReport

__all__ = [
    "Tensor",
    "Tape",
    "TapeMismatchError",
    "NonFiniteError",
    "ShapeError",
    "backward",
    "no_tape",
    "ops",
    "nn",
    "spawn_rng",
    "derive_seed",
    "finite_diff_check",
    "GradReport",
]
