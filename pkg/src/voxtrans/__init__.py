"""Guided multi-resolution 3D GAN for volumetric image-to-image translation.

Pipeline overview:

- :mod:`voxtrans.volumes` — volume container, intensity scaling, resampling,
  resolution pyramids, dataset manifests.
- :mod:`voxtrans.io` — compressed NIfTI and raw-binary volume codecs, manifest CSV.
- :mod:`voxtrans.patches` — patch sampling and Gaussian-blended sliding-window
  inference.
- :mod:`voxtrans.synthdata` — procedural paired-modality dataset generator.
- :mod:`voxtrans.generator` / :mod:`voxtrans.discriminator` — the translation
  model and its multi-resolution voxel critic.
- :mod:`voxtrans.features` — frozen 2D feature extractors for perception and
  perceptual-metric losses.
- :mod:`voxtrans.losses` — relativistic adversarial and composite generator
  objectives.
- :mod:`voxtrans.training` — alternating optimization loop with ablation
  switches and resumable checkpoints.
- :mod:`voxtrans.evaluation` — image-quality metrics, reports, and
  downstream-segmentation applicability checks.
- :mod:`voxtrans.config` / :mod:`voxtrans.cli` — strict experiment
  configuration and the command-line pipeline.
"""

from .errors import VoxtransError
from .volumes import (
    CaseRecord,
    DatasetManifest,
    IntensityDomain,
    Modality,
    ResolutionPyramid,
    Split,
    Volume,
    build_pyramid,
    default_split,
    resample,
    scale_intensity,
)
from .io import load_manifest, load_volume, save_manifest, save_volume
from .patches import gaussian_importance, sample_patch_pair, sliding_window_infer
from .synthdata import SynthSpec, TransformKind, generate_case, generate_manifest
from .generator import GeneratorConfig, TranslationGenerator
from .discriminator import DiscriminatorConfig, build_discriminator
from .features import make_extractor, make_metric_extractor
from .losses import LossReport, LossWeights, generator_total_loss, relativistic_d_loss
from .training import (
    AblationFlags,
    TrainConfig,
    load_checkpoint,
    run_training,
    save_checkpoint,
    train_step,
)
from .evaluation import (
    MetricsReport,
    applicability_pretrained_mode,
    applicability_train_mode,
    dice,
    evaluate_translation,
    lpips_2p5d,
    nmse,
    psnr,
    ssim3d,
    translate_volume,
)
from .config import ExperimentConfig, config_hash, load_config

__version__ = "0.1.0"

__all__ = [
    "AblationFlags",
    "CaseRecord",
    "DatasetManifest",
    "DiscriminatorConfig",
    "ExperimentConfig",
    "GeneratorConfig",
    "IntensityDomain",
    "LossReport",
    "LossWeights",
    "MetricsReport",
    "Modality",
    "ResolutionPyramid",
    "Split",
    "SynthSpec",
    "TrainConfig",
    "TransformKind",
    "TranslationGenerator",
    "Volume",
    "VoxtransError",
    "applicability_pretrained_mode",
    "applicability_train_mode",
    "build_discriminator",
    "build_pyramid",
    "config_hash",
    "default_split",
    "dice",
    "evaluate_translation",
    "gaussian_importance",
    "generate_case",
    "generate_manifest",
    "generator_total_loss",
    "load_checkpoint",
    "load_config",
    "load_manifest",
    "load_volume",
    "lpips_2p5d",
    "make_extractor",
    "make_metric_extractor",
    "nmse",
    "psnr",
    "relativistic_d_loss",
    "resample",
    "run_training",
    "sample_patch_pair",
    "save_checkpoint",
    "save_manifest",
    "save_volume",
    "scale_intensity",
    "sliding_window_infer",
    "ssim3d",
    "train_step",
    "translate_volume",
]
