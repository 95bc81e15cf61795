"""Few-step distillation of flow-matching models on toy data, in numpy."""

from .autodiff import AdamW, ParamSet, Tensor, backward, no_grad
from .networks import NetSpec, VelocityNet, cfg_forward
from .schedule import cm_apply, interpolate, score_from_velocity, velocity_target

__version__ = "0.1.0"

__all__ = [
    "AdamW",
    "NetSpec",
    "ParamSet",
    "Tensor",
    "VelocityNet",
    "backward",
    "cfg_forward",
    "cm_apply",
    "interpolate",
    "no_grad",
    "score_from_velocity",
    "velocity_target",
]
