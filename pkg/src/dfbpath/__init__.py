"""Distance-from-boundary priors for patch-based slide segmentation."""

from .distance import distance_transform, distance_transform_chamfer, distance_transform_exact, max_dfb
from .estimators import DfBPatchClassifier, DfBTransformer, TissueMasker
from .imgproc import HsvThresholds, tissue_mask
from .metrics import compute_metrics, confusion
from .model import FusionMode, TrainConfig

__version__ = "0.1.0"

__all__ = [
    "DfBPatchClassifier",
    "DfBTransformer",
    "FusionMode",
    "HsvThresholds",
    "TissueMasker",
    "TrainConfig",
    "compute_metrics",
    "confusion",
    "distance_transform",
    "distance_transform_chamfer",
    "distance_transform_exact",
    "max_dfb",
    "tissue_mask",
]
