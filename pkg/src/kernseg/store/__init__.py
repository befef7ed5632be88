from .schema import (
    DatasetIndex,
    ImageRecord,
    InstanceAnnotation,
    RoIFeature,
    SegFeatureGrid,
    SOURCE_GROUND_TRUTH,
    SOURCE_RPN_PROPOSAL,
)
from .io import (
    DatasetWriter,
    load_annotations,
    load_dataset,
    stream_annotations,
    stream_grids,
    stream_rois,
    validate_dataset,
)
from .synthetic import SyntheticConfig, generate_synthetic

__all__ = [
    "DatasetIndex",
    "DatasetWriter",
    "ImageRecord",
    "InstanceAnnotation",
    "RoIFeature",
    "SegFeatureGrid",
    "SOURCE_GROUND_TRUTH",
    "SOURCE_RPN_PROPOSAL",
    "SyntheticConfig",
    "generate_synthetic",
    "load_annotations",
    "load_dataset",
    "stream_annotations",
    "stream_grids",
    "stream_rois",
    "validate_dataset",
]
