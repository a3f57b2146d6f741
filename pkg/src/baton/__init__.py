"""Music-driven conducting motion: contrastive pretraining plus a clean-motion diffusion generator."""
from .data import (COCO_UPPER_BODY, JointLayout, MusicFeatureSequence, PairedClip, PoseSequence,
                   generate_synthetic_clip, load_dataset, save_dataset, synthetic_corpus)
from .diffusion import NoiseSchedule, ddim_step, ddpm_step, make_schedule, q_sample, sample
from .networks import ModelBundle, ModelConfig, load_bundle, save_bundle
from .pipeline import MotionGenerator, SamplerSettings
from .training import StageOneConfig, StageTwoConfig, train_contrastive, train_diffusion

__version__ = "0.1.0"

__all__ = [
    "COCO_UPPER_BODY", "JointLayout", "MusicFeatureSequence", "PairedClip", "PoseSequence",
    "generate_synthetic_clip", "load_dataset", "save_dataset", "synthetic_corpus",
    "NoiseSchedule", "ddim_step", "ddpm_step", "make_schedule", "q_sample", "sample",
    "ModelBundle", "ModelConfig", "load_bundle", "save_bundle",
    "MotionGenerator", "SamplerSettings",
    "StageOneConfig", "StageTwoConfig", "train_contrastive", "train_diffusion",
]
