"""Weakly-supervised temporal action localization with video-specific
query-key attention, built on a small reverse-mode autodiff core."""

from .autodiff import ComputationRecord, Tensor, finite_diff_check, tensor
from .data import SyntheticSpec, generate_synthetic, load_manifest, read_features, write_features
from .evaluate import EvalReport, GroundTruthSegment, average_precision, evaluate, tiou
from .localize import ActionProposal, InferenceConfig, VideoMeta, localize, soft_nms
from .losses import LabelVector, LossWeights, joint_loss
from .model import ModelConfig, ModelOutputs, ModelParams, forward, init_params
from .training import TrainConfig, TrainVideo, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"

__all__ = [
    "ActionProposal", "ComputationRecord", "EvalReport", "GroundTruthSegment",
    "InferenceConfig", "LabelVector", "LossWeights", "ModelConfig",
    "ModelOutputs", "ModelParams", "SyntheticSpec", "Tensor", "TrainConfig",
    "TrainVideo", "VideoMeta", "average_precision", "evaluate",
    "finite_diff_check", "forward", "generate_synthetic", "init_params",
    "joint_loss", "load_checkpoint", "load_manifest", "localize",
    "read_features", "save_checkpoint", "soft_nms", "tensor", "tiou", "train",
    "write_features",
]
