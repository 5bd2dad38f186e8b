"""Pixel-level cue discovery for weakly supervised segmentation."""

from .attention import (
    ClassFilterBank,
    ClassScores,
    FeatureVolume,
    ImageTags,
    classification_grad,
    classification_loss,
    extract_attention,
    head_forward,
    init_filter_bank,
    train_head,
)
from .cues import Combiner, CueConfig, adapt_cues, combine, discover_cues
from .losses import combined_loss, segmentation_loss
from .maps import (
    IGNORE_LABEL,
    LabelMap,
    ScoreMap,
    ScoreVolume,
    argmax_map,
    fuse_max,
    normalize_slice,
    resize_bilinear,
    softmax_volume,
)
from .metrics import ConfusionMatrix, accumulate, cue_quality, iou, pixel_accuracy
from .saliency import (
    ContrastDetector,
    ErasePolicy,
    ExternalDetector,
    RgbImage,
    contrast_saliency,
    erase,
    hierarchical_saliency,
)

__all__ = [
    "ClassFilterBank",
    "ClassScores",
    "Combiner",
    "ConfusionMatrix",
    "ContrastDetector",
    "CueConfig",
    "ErasePolicy",
    "ExternalDetector",
    "FeatureVolume",
    "IGNORE_LABEL",
    "ImageTags",
    "LabelMap",
    "RgbImage",
    "ScoreMap",
    "ScoreVolume",
    "accumulate",
    "adapt_cues",
    "argmax_map",
    "classification_grad",
    "classification_loss",
    "combine",
    "combined_loss",
    "contrast_saliency",
    "cue_quality",
    "discover_cues",
    "erase",
    "extract_attention",
    "fuse_max",
    "head_forward",
    "hierarchical_saliency",
    "init_filter_bank",
    "iou",
    "normalize_slice",
    "pixel_accuracy",
    "resize_bilinear",
    "segmentation_loss",
    "softmax_volume",
    "train_head",
]
