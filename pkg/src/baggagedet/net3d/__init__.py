from .loss import AnchorCountError, LossParts, compute_loss
from .model import BackboneConfig, FeaturePyramid, HeadOutputs, ModelConfig, RetinaNet3D, parameter_count
from .train import (
    EpochRecord,
    TrainConfig,
    TrainingError,
    TrainLog,
    build_model,
    load_checkpoint,
    prepare_sample,
    save_checkpoint,
    train,
)

__all__ = [
    "AnchorCountError",
    "BackboneConfig",
    "EpochRecord",
    "FeaturePyramid",
    "HeadOutputs",
    "LossParts",
    "ModelConfig",
    "RetinaNet3D",
    "TrainConfig",
    "TrainLog",
    "TrainingError",
    "build_model",
    "compute_loss",
    "load_checkpoint",
    "parameter_count",
    "prepare_sample",
    "save_checkpoint",
    "train",
]
