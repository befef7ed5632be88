"""Record types held in a feature store and their invariants."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..exceptions import DatasetError
from ..rle import mask_to_grid, rle_decode

SOURCE_RPN_PROPOSAL = "rpn_proposal"
SOURCE_GROUND_TRUTH = "ground_truth"

LABEL_IGNORED = -1
LABEL_BACKGROUND = 0

# Sentinel roi_index for grids extracted at ground-truth boxes rather
# than at a test-time RoI.
GRID_AT_GT_BOX = -1


@dataclass
class ImageRecord:
    id: int
    width: int
    height: int
    split: str


@dataclass
class DatasetIndex:
    """Manifest contents: class list, image table, and feature dimensions."""

    num_classes: int
    class_names: list[str]
    images: list[ImageRecord]
    d: int
    s: int
    f: int
    splits: list[str]
    format_version: int = 1
    grid_convention: str = "per_roi"

    def validate(self) -> None:
        if self.num_classes < 1:
            raise DatasetError("manifest: num_classes must be >= 1")
        if len(self.class_names) != self.num_classes:
            raise DatasetError(
                f"manifest: {len(self.class_names)} class names for "
                f"{self.num_classes} classes"
            )
        if min(self.d, self.s, self.f) < 1:
            raise DatasetError("manifest: feature dims d, s, f must be >= 1")
        ids = [img.id for img in self.images]
        if len(ids) != len(set(ids)):
            raise DatasetError("manifest: image ids are not unique")
        for img in self.images:
            if img.split not in self.splits:
                raise DatasetError(
                    f"manifest: image {img.id} has unknown split {img.split!r}"
                )
            if img.width < 1 or img.height < 1:
                raise DatasetError(f"manifest: image {img.id} has empty extent")

    def images_in(self, split: str) -> list[ImageRecord]:
        return [img for img in self.images if img.split == split]

    def image_by_id(self, image_id: int) -> ImageRecord:
        for img in self.images:
            if img.id == image_id:
                return img
        raise DatasetError(f"unknown image id {image_id}")


@dataclass
class RoIFeature:
    """One pooled detection feature vector with its box and assignment."""

    image_id: int
    box: np.ndarray  # (4,) x1, y1, x2, y2 pixels
    feature: np.ndarray  # (d,) float32
    source: str = SOURCE_RPN_PROPOSAL
    label: int = LABEL_BACKGROUND  # 0 background, 1..N class, -1 ignored
    iou: float = 0.0
    gt_index: int = -1  # runtime-only: matched annotation index, not serialized


@dataclass
class SegFeatureGrid:
    """One s x s x f mask-head feature map for a region.

    Grids extracted at ground-truth boxes carry the class id and both
    mask views; grids extracted at test-time RoIs carry ``roi_index``
    (position of the RoI within its image's record order) and no masks.
    """

    image_id: int
    box: np.ndarray
    class_id: int  # 1..N for ground-truth grids, 0 for RoI-linked grids
    grid: np.ndarray  # (s, s, f) float32
    mask_grid: np.ndarray | None = None  # (s, s) bool
    mask_fullres: dict | None = None  # RLE at image resolution
    roi_index: int = GRID_AT_GT_BOX


@dataclass
class InstanceAnnotation:
    """Ground-truth instance: class, box, and full-resolution RLE mask."""

    image_id: int
    class_id: int
    box: np.ndarray
    mask: dict = field(repr=False)


def _check_box_in_image(box: np.ndarray, image: ImageRecord, where: str) -> None:
    x1, y1, x2, y2 = (float(v) for v in box)
    if not (x2 > x1 and y2 > y1):
        raise DatasetError(f"{where}: degenerate box {box.tolist()}")
    if x1 < 0 or y1 < 0 or x2 > image.width or y2 > image.height:
        raise DatasetError(
            f"{where}: box {box.tolist()} escapes image "
            f"{image.width}x{image.height}"
        )


def validate_roi(roi: RoIFeature, index: DatasetIndex, where: str) -> None:
    image = index.image_by_id(roi.image_id)
    _check_box_in_image(roi.box, image, where)
    if roi.feature.shape != (index.d,):
        raise DatasetError(
            f"{where}: feature length {roi.feature.shape} vs manifest d={index.d}"
        )
    if not np.isfinite(roi.feature).all():
        raise DatasetError(f"{where}: feature contains NaN or Inf")
    if roi.source not in (SOURCE_RPN_PROPOSAL, SOURCE_GROUND_TRUTH):
        raise DatasetError(f"{where}: unknown source {roi.source!r}")
    if not (LABEL_IGNORED <= roi.label <= index.num_classes):
        raise DatasetError(f"{where}: label {roi.label} out of range")
    if not (0.0 <= roi.iou <= 1.0):
        raise DatasetError(f"{where}: iou {roi.iou} out of [0, 1]")


def validate_grid(grid: SegFeatureGrid, index: DatasetIndex, where: str) -> None:
    image = index.image_by_id(grid.image_id)
    _check_box_in_image(grid.box, image, where)
    if grid.grid.shape != (index.s, index.s, index.f):
        raise DatasetError(
            f"{where}: grid shape {grid.grid.shape} vs manifest "
            f"(s, s, f)=({index.s}, {index.s}, {index.f})"
        )
    if not np.isfinite(grid.grid).all():
        raise DatasetError(f"{where}: grid contains NaN or Inf")
    if grid.class_id == 0:
        if grid.roi_index < 0:
            raise DatasetError(f"{where}: RoI-linked grid without roi_index")
        if grid.mask_grid is not None or grid.mask_fullres is not None:
            raise DatasetError(f"{where}: RoI-linked grid must not carry masks")
        return
    if not (1 <= grid.class_id <= index.num_classes):
        raise DatasetError(f"{where}: class_id {grid.class_id} out of range")
    if grid.mask_grid is None or grid.mask_fullres is None:
        raise DatasetError(f"{where}: ground-truth grid is missing a mask view")
    if grid.mask_grid.shape != (index.s, index.s):
        raise DatasetError(
            f"{where}: mask_grid shape {grid.mask_grid.shape} vs s={index.s}"
        )
    full = rle_decode(grid.mask_fullres)
    if full.shape != (image.height, image.width):
        raise DatasetError(
            f"{where}: full-res mask {full.shape} vs image "
            f"{image.height}x{image.width}"
        )
    resampled = mask_to_grid(full, grid.box, index.s)
    if not np.array_equal(resampled, grid.mask_grid):
        raise DatasetError(
            f"{where}: mask_grid is not the resampled view of the full-res mask"
        )


def validate_annotation(ann: InstanceAnnotation, index: DatasetIndex, where: str) -> None:
    image = index.image_by_id(ann.image_id)
    _check_box_in_image(ann.box, image, where)
    if not (1 <= ann.class_id <= index.num_classes):
        raise DatasetError(f"{where}: class_id {ann.class_id} out of range")
    if (ann.mask["h"], ann.mask["w"]) != (image.height, image.width):
        raise DatasetError(
            f"{where}: mask extent {(ann.mask['h'], ann.mask['w'])} vs image "
            f"{image.height}x{image.width}"
        )
    rle_decode(ann.mask)  # raises if counts are inconsistent
