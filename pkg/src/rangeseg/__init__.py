"""Range-image LiDAR semantic segmentation toolkit."""

from .config import ExperimentConfig, load_config, preset
from .losses import LossConfig, boundary_loss, lovasz_softmax, main_loss, \
    total_loss, weighted_cross_entropy
from .metrics import ConfusionMatrix, benchmark_forward, evaluate_split, iou
from .network import ModelConfig, SegmentationOutput, build_model, \
    count_parameters
from .projection import KnnConfig, ProjectionConfig, RangeImage, \
    knn_postprocess, spherical_project, unproject_labels
from .scan_io import AugmentationConfig, ClassConfig, PointCloud, SplitSpec, \
    augment, load_labels, load_scan, write_labels, write_scan
from .toy_data import make_toy_dataset

__version__ = "0.1.0"

__all__ = [
    "AugmentationConfig", "ClassConfig", "ConfusionMatrix", "ExperimentConfig",
    "KnnConfig", "LossConfig", "ModelConfig", "PointCloud", "ProjectionConfig",
    "RangeImage", "SegmentationOutput", "SplitSpec", "augment",
    "benchmark_forward", "boundary_loss", "build_model", "count_parameters",
    "evaluate_split", "iou", "knn_postprocess", "load_config", "load_labels",
    "load_scan", "lovasz_softmax", "main_loss", "make_toy_dataset", "preset",
    "spherical_project", "total_loss", "unproject_labels",
    "weighted_cross_entropy", "write_labels", "write_scan",
]
