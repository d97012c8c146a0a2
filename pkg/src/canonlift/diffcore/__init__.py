from . import ops
from .gradcheck import GradCheckReport, grad_check, relative_error
from .nn import (Adam, AdamConfig, CheckpointError, ParametricMap, StepReport, load_checkpoint,
                 optimizer_step, save_checkpoint)
from .tape import Buffer, Node, ParamStore, ShapeError, Tape

__all__ = [
    "Adam", "AdamConfig", "Buffer", "CheckpointError", "GradCheckReport", "Node", "ParamStore",
    "ParametricMap", "ShapeError", "StepReport", "Tape", "grad_check", "load_checkpoint", "ops",
    "optimizer_step", "relative_error", "save_checkpoint",
]
