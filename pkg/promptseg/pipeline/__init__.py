"""
Training pipeline: synthetic data, the segmentation model, the composite
objective, checkpoints, evaluation and the training loop.
"""

from .checkpoint import load_checkpoint, parameter_hash, save_checkpoint
from .config import ModelConfig, RunConfig, TrainConfig, load_run_config, save_run_config
from .data import SegmentationSplit, SyntheticDatasetSpec, generate_dataset
from .decoder import FusionDecoder
from .losses import LossBreakdown, LossWeights, seg_loss, total_loss
from .metrics import EvalReport, EvalSource, confusion_matrix, evaluate, iou_from_confusion
from .model import PromptSegmentor, SegmentationOutput, build_model
from .train import TrainResult, build_optimizer, train

__all__ = [
    "SyntheticDatasetSpec",
    "SegmentationSplit",
    "generate_dataset",

    "ModelConfig",
    "TrainConfig",
    "RunConfig",
    "load_run_config",
    "save_run_config",

    "FusionDecoder",
    "PromptSegmentor",
    "SegmentationOutput",
    "build_model",

    "LossWeights",
    "LossBreakdown",
    "seg_loss",
    "total_loss",

    "EvalSource",
    "EvalReport",
    "confusion_matrix",
    "iou_from_confusion",
    "evaluate",

    "parameter_hash",
    "save_checkpoint",
    "load_checkpoint",

    "TrainResult",
    "build_optimizer",
    "train",
]
