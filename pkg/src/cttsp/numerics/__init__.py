from . import ops
from .gradcheck import GradCheckResult, grad_check
from .optim import Adam, CosineSchedule, OptimizerState, adam_step, cosine_lr
from .tensor import NonFiniteError, ShapeError, Tape, Tensor, active_tape, as_tensor

__all__ = [
    "Adam",
    "CosineSchedule",
    "GradCheckResult",
    "NonFiniteError",
    "OptimizerState",
    "ShapeError",
    "Tape",
    "Tensor",
    "active_tape",
    "adam_step",
    "as_tensor",
    "cosine_lr",
    "grad_check",
    "ops",
]
