"""Reference-based paint-bucket colorization of line art by segment matching."""

__version__ = "0.1.0"

from .correspondence import ColorAssignment, ReferencePool, match, propagate_colors, similarity_map
from .encoders import BackboneUnavailable, Dinov2Backbone, ProceduralBackbone, SpatialUNet
from .features import FusionHead, segment_pool, segment_pool_fixed
from .metrics import EvalReport, pixel_metrics, postprocess_generated, segment_metrics
from .model import Checkpoint, ColorizeOptions, Colorizer, Drawing
from .objective import LossWeights, consistency_loss, cross_entropy_loss, total_loss
from .segmentation import SegmentMap, SegmentPalette, extract_segments, read_segment_colors
from .train import TrainConfig, train

__all__ = [
    "BackboneUnavailable", "Checkpoint", "ColorAssignment", "ColorizeOptions", "Colorizer", "Dinov2Backbone",
    "Drawing", "EvalReport", "FusionHead", "LossWeights", "ProceduralBackbone", "ReferencePool", "SegmentMap",
    "SegmentPalette", "SpatialUNet", "TrainConfig", "consistency_loss", "cross_entropy_loss", "extract_segments",
    "match", "pixel_metrics", "postprocess_generated", "propagate_colors", "read_segment_colors",
    "segment_metrics", "segment_pool", "segment_pool_fixed", "similarity_map", "total_loss", "train",
]
