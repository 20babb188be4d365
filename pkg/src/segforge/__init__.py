"""Deterministic tools for defect-segmentation datasets: deduplication,
augmentation, dynamic label injection, episodic sampling, prototype
segmentation, losses, metrics and layer cost arithmetic."""

from .core import (
    CLASS_NAMES,
    DEFAULT_CIW,
    DEFAULT_SEED,
    NUM_CLASSES,
    ClassDistribution,
    DatasetError,
    Sample,
    class_distribution,
    derive_seed,
    load_dataset,
    save_dataset,
    split_dataset,
)

__version__ = "0.1.0"

__all__ = [
    "CLASS_NAMES",
    "DEFAULT_CIW",
    "DEFAULT_SEED",
    "NUM_CLASSES",
    "ClassDistribution",
    "DatasetError",
    "Sample",
    "class_distribution",
    "derive_seed",
    "load_dataset",
    "save_dataset",
    "split_dataset",
]
