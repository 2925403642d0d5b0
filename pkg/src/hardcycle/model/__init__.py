from .adam import AdamState, OptimizerError, adam_step
from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .net import (
    PRESETS,
    BilinearDemosaicer,
    CnnDemosaicer,
    Gradients,
    ModelParams,
    ModelSpec,
    backward,
    forward,
    init_params,
    l1_loss_and_grad,
    pack_bayer,
    param_count,
    param_shapes,
    preset,
    unpack_bayer,
    value_and_grad,
)

__all__ = [
    "PRESETS", "AdamState", "BilinearDemosaicer", "Checkpoint", "CheckpointError",
    "CnnDemosaicer", "Gradients", "ModelParams", "ModelSpec", "OptimizerError",
    "adam_step", "backward", "forward", "init_params", "l1_loss_and_grad",
    "load_checkpoint", "pack_bayer", "param_count", "param_shapes", "preset",
    "save_checkpoint", "unpack_bayer", "value_and_grad",
]
