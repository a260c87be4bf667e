"""patchebm: glass-box 3D image classification.

Patch-wise CNN backbones produce one scalar feature per region; an
explainable boosting head turns them into a prediction that decomposes
exactly into per-feature contributions. Training alternates between
refitting the head on frozen-CNN features and stepping the CNNs through the
frozen head's surrogate gradient.
"""

from .backbones import BackboneSet, PatchGrid, extract_patches
from .datakit import SynthConfig, Volume, VolumeDataset, generate_synthetic
from .ebm import EbmHead, EbmTrainConfig, ShapeFunction, fit_ebm
from .evalstats import EvalReport, ScoredSet, auc, bootstrap_ci, delong_test, stratified_split
from .trainer import (
    GlIcnnModel,
    TrainConfig,
    finetune,
    load_checkpoint,
    save_checkpoint,
    train_glicnn,
    train_pipeline,
    warmup_glcnn,
)

__version__ = "0.1.0"

__all__ = [
    "BackboneSet",
    "PatchGrid",
    "extract_patches",
    "SynthConfig",
    "Volume",
    "VolumeDataset",
    "generate_synthetic",
    "EbmHead",
    "EbmTrainConfig",
    "ShapeFunction",
    "fit_ebm",
    "EvalReport",
    "ScoredSet",
    "auc",
    "bootstrap_ci",
    "delong_test",
    "stratified_split",
    "GlIcnnModel",
    "TrainConfig",
    "finetune",
    "load_checkpoint",
    "save_checkpoint",
    "train_glicnn",
    "train_pipeline",
    "warmup_glcnn",
    "__version__",
]
