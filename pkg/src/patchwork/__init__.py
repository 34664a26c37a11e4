"""Patch-level region classifiers, attribution maps and attribution-guided augmentation.

A small numpy CNN engine trains a classifier that predicts an image attribute
from one k×k patch plus a learned region embedding. Its confidence over a
patch grid gives region and pixel attribution maps, which drive mask and noise
augmentation for bias-mitigation experiments.
"""
from .errors import ConfigError, DimensionError, FormatError, NumericError, PatchworkError, StateError
from .grid import PatchGridSpec, make_grid
from .confidence import ConfidenceMethod, confidence, confidence_batch, ece
from .region import RegionClassifierModel, RegionTrainConfig, train_region_classifier
from .attribution import PixelAttributionMap, RegionAttributionMap, normalize01, pixel_map, region_map
from .augmentation import AugmentationPolicy, Scheme, augment
from .dataset import BiasSpec, DatasetManifest, SyntheticSpec, generate_synthetic, load_manifest
from .experiment import ExperimentConfig, ExperimentReport, TargetTrainConfig, run_experiment

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "DimensionError", "FormatError", "NumericError", "PatchworkError", "StateError",
    "PatchGridSpec", "make_grid", "ConfidenceMethod", "confidence", "confidence_batch", "ece",
    "RegionClassifierModel", "RegionTrainConfig", "train_region_classifier",
    "PixelAttributionMap", "RegionAttributionMap", "normalize01", "pixel_map", "region_map",
    "AugmentationPolicy", "Scheme", "augment",
    "BiasSpec", "DatasetManifest", "SyntheticSpec", "generate_synthetic", "load_manifest",
    "ExperimentConfig", "ExperimentReport", "TargetTrainConfig", "run_experiment",
]
