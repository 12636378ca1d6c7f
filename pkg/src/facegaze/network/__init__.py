from .gradcheck import GradCheckReport, grad_check
from .layers import SpatialWeights, spatial_weights_backward, spatial_weights_forward
from .model import (
    ConvSpec,
    ModelConfig,
    Network,
    desk_config,
    init_parameters,
    paper_scale_config,
    parameter_count,
)
from .training import (
    TrainedModel,
    TrainingDivergedError,
    l1_loss,
    load_model,
    save_model,
    train,
    write_training_log,
)

__all__ = [
    "ConvSpec",
    "GradCheckReport",
    "ModelConfig",
    "Network",
    "SpatialWeights",
    "TrainedModel",
    "TrainingDivergedError",
    "desk_config",
    "grad_check",
    "init_parameters",
    "l1_loss",
    "load_model",
    "paper_scale_config",
    "parameter_count",
    "save_model",
    "spatial_weights_backward",
    "spatial_weights_forward",
    "train",
    "write_training_log",
]
