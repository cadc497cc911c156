"""Toy-scale Net1D-style network, its gradient engine and training recipe."""

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .engine import ShapeError, Tensor, bce_with_logits, conv1d, se_attention
from .model import (BlockConfig, ModelConfig, ModelParams, bottleneck_block, init_params,
                    model_forward, predict_logits, predict_proba, tiny_config)
from .optim import EarlyStopping, TrainingError, adamw_step, cosine_lr
from .train import History, TrainConfig, finetune, train

__all__ = [
    "BlockConfig", "CheckpointError", "EarlyStopping", "History", "ModelConfig", "ModelParams",
    "ShapeError", "Tensor", "TrainConfig", "TrainingError", "adamw_step", "bce_with_logits",
    "bottleneck_block", "conv1d", "cosine_lr", "finetune", "init_params", "load_checkpoint",
    "model_forward", "predict_logits", "predict_proba", "save_checkpoint", "se_attention",
    "tiny_config", "train",
]
