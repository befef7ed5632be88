"""Online instance detection and segmentation from precomputed region
features, built on Nystrom-approximated Gaussian-kernel classifiers."""

from .boxes import (
    apply_bbox_deltas,
    clip_boxes,
    compute_bbox_targets,
    iou_box,
    iou_matrix,
    nms,
)
from .config import RunConfig
from .detection import (
    DetectionResult,
    MinibootstrapConfig,
    OnlineDetector,
    assign_roi_labels,
    minibootstrap_train,
)
from .evaluation import EvalReport, average_precision, evaluate
from .exceptions import (
    ConfigError,
    DatasetError,
    InputError,
    KernsegError,
    NumericalError,
)
from .falkon import FalkonClassifier, exact_nystrom_krr
from .kernels import gaussian_kernel
from .ridge import RidgeBoxRegressor
from .rle import iou_mask, mask_to_grid, rle_decode, rle_encode
from .segmentation import (
    InstanceMaskResult,
    OnlineSegmenter,
    extract_pixel_samples,
    subsample,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DatasetError",
    "DetectionResult",
    "EvalReport",
    "FalkonClassifier",
    "InputError",
    "InstanceMaskResult",
    "KernsegError",
    "MinibootstrapConfig",
    "NumericalError",
    "OnlineDetector",
    "OnlineSegmenter",
    "RidgeBoxRegressor",
    "RunConfig",
    "apply_bbox_deltas",
    "assign_roi_labels",
    "average_precision",
    "clip_boxes",
    "compute_bbox_targets",
    "evaluate",
    "exact_nystrom_krr",
    "extract_pixel_samples",
    "gaussian_kernel",
    "iou_box",
    "iou_mask",
    "iou_matrix",
    "mask_to_grid",
    "minibootstrap_train",
    "nms",
    "rle_decode",
    "rle_encode",
    "subsample",
    "__version__",
]
