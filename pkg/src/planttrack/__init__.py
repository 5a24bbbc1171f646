"""Plant keypoint heatmap prediction and tracking on foundation-model features."""

from planttrack.errors import FormatError, NumericalError, PlantTrackError, ValidationError
from planttrack.features import (
    FeatureMap,
    apply_depth_mask,
    downsample_mask,
    foreground_from_depth,
    read_tensor,
    write_tensor,
)

__version__ = "0.1.0"

__all__ = [
    "FeatureMap",
    "FormatError",
    "NumericalError",
    "PlantTrackError",
    "ValidationError",
    "apply_depth_mask",
    "downsample_mask",
    "foreground_from_depth",
    "read_tensor",
    "write_tensor",
]
