"""Weakly supervised lesion segmentation with scribbles and soft size constraints."""

from .core import (BACKGROUND, LESION, N_CLASSES, PROSTATE, CaseRecord, GridSpec,
                   IntensityVolume, LabelVolume, ValidationError, derive_rng)
from .losses import UNLABELED, ConstraintConfig, SizeBounds, combined_loss
from .model import NetSpec

__all__ = [
    "BACKGROUND", "PROSTATE", "LESION", "N_CLASSES", "UNLABELED",
    "CaseRecord", "GridSpec", "IntensityVolume", "LabelVolume", "ValidationError",
    "derive_rng", "ConstraintConfig", "SizeBounds", "combined_loss", "NetSpec",
]

__version__ = "0.1.0"
