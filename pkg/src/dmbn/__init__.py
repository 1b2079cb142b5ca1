"""Multimodal brain network modeling: attention-based graph convolution
encoders, cross-modality connectivity decoders, supervised classification,
and node saliency, on a self-contained reverse-mode autodiff core.
"""

from .graphs import (
    BrainGraph,
    Dataset,
    SignSplit,
    SubjectRecord,
    load_dataset,
    neighborhood,
    save_dataset,
    split_signs,
    stratified_kfold,
    validate,
)
from .layers import DmbnModel, ModelConfig
from .losses import AblationFlags, LossBreakdown, LossWeights
from .synthetic import SynthParams, generate_synthetic
from .training import Metrics, TrainConfig, TrainReport, evaluate, reconstruction_stats, train

__all__ = [
    "BrainGraph",
    "Dataset",
    "SignSplit",
    "SubjectRecord",
    "load_dataset",
    "neighborhood",
    "save_dataset",
    "split_signs",
    "stratified_kfold",
    "validate",
    "DmbnModel",
    "ModelConfig",
    "AblationFlags",
    "LossBreakdown",
    "LossWeights",
    "SynthParams",
    "generate_synthetic",
    "Metrics",
    "TrainConfig",
    "TrainReport",
    "evaluate",
    "reconstruction_stats",
    "train",
]
