"""Unsupervised anomaly detection for structured images with a space-aware memory.

Everything runs on a small reverse-mode autodiff engine over numpy
(:mod:`simsid.autodiff`); see the README for the pipeline and the CLI.
"""
from .data import DatasetSplit, ImageSample, gen_synthetic, load_image_dir, synthetic_split
from .networks import ModelConfig, SimSIDModel
from .scoring import CalibrationStats, anomaly_score, raw_score, roc_auc
from .training import LossWeights, TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "CalibrationStats",
    "DatasetSplit",
    "ImageSample",
    "LossWeights",
    "ModelConfig",
    "SimSIDModel",
    "TrainConfig",
    "anomaly_score",
    "gen_synthetic",
    "load_image_dir",
    "raw_score",
    "roc_auc",
    "synthetic_split",
    "train",
]
