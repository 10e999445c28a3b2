"""Masked frame-pair autoencoding for video correspondence, in plain NumPy."""
from .data import SyntheticSceneSpec, VideoClip, generate_dataset, generate_synthetic_clip
from .estimator import LabelPropagator, SiamMAE
from .labelprop import PRESETS, PropagationConfig, evaluate_sequence
from .model import MaskSpec, ModelConfig, SiamMAEModel
from .train import TrainConfig, Trainer, load_checkpoint, save_checkpoint

__version__ = "0.1.0"

__all__ = [
    "LabelPropagator", "MaskSpec", "ModelConfig", "PRESETS", "PropagationConfig", "SiamMAE",
    "SiamMAEModel", "SyntheticSceneSpec", "TrainConfig", "Trainer", "VideoClip",
    "evaluate_sequence", "generate_dataset", "generate_synthetic_clip", "load_checkpoint",
    "save_checkpoint",
]
