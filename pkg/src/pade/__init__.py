"""Occlusion-robust person re-identification with parallel augmentation and
dual feature enhancement."""

__version__ = "0.1.0"

from .augment import (AugmentConfig, ImageTriplet, base_augment, cropping_augment,
                      derive_seed, erasing_augment, parallel_augment, serial_augment)
from .backbone import BackboneConfig, FeatureBundle, VitEncoder, forward_triplet
from .config import EvalConfig, RunConfig, load_config
from .data import ReIDDataset, ReIDSplits, SyntheticSpec, generate_synthetic, load_directory
from .enhance import REM, DualEnhancement, EnhancedBundle
from .errors import AugmentError, ConfigError, DataError, PadeError, TrainingDiverged
from .evaluation import RetrievalResult, compute_map_cmc, evaluate_model, occlusion_sweep
from .model import PadeModel, build_model
from .objective import BNNeckHead, LossReport, total_loss, triplet_loss
from .trainer import FitResult, TrainConfig, fit, load_checkpoint, model_from_checkpoint

__all__ = [
    "AugmentConfig", "ImageTriplet", "base_augment", "cropping_augment",
    "derive_seed", "erasing_augment", "parallel_augment", "serial_augment",
    "BackboneConfig", "FeatureBundle", "VitEncoder", "forward_triplet",
    "EvalConfig", "RunConfig", "load_config",
    "ReIDDataset", "ReIDSplits", "SyntheticSpec", "generate_synthetic", "load_directory",
    "REM", "DualEnhancement", "EnhancedBundle",
    "AugmentError", "ConfigError", "DataError", "PadeError", "TrainingDiverged",
    "RetrievalResult", "compute_map_cmc", "evaluate_model", "occlusion_sweep",
    "PadeModel", "build_model",
    "BNNeckHead", "LossReport", "total_loss", "triplet_loss",
    "FitResult", "TrainConfig", "fit", "load_checkpoint", "model_from_checkpoint",
]
