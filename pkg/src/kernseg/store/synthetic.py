"""Seeded synthetic feature stores for desk-scale verification.

Stands in for a real feature-extraction network: detection features of
class c are drawn from an isotropic Gaussian centered at a class-specific
mean (separation times a unit direction, background at the origin), and
mask-grid pixels carry the class pixel-mean inside an elliptical
ground-truth mask and the background mean outside. Everything is
deterministic under the seed, including file bytes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..exceptions import ConfigError
from ..rle import mask_to_grid, rle_encode
from .io import DatasetWriter, load_dataset
from .schema import (
    DatasetIndex,
    GRID_AT_GT_BOX,
    ImageRecord,
    InstanceAnnotation,
    LABEL_BACKGROUND,
    LABEL_IGNORED,
    RoIFeature,
    SegFeatureGrid,
    SOURCE_GROUND_TRUTH,
    SOURCE_RPN_PROPOSAL,
)

# Jitter magnitudes cycled over the proposals of one ground-truth box;
# the first two stay comfortably above 0.5 IoU.
_JITTER_MAGNITUDES = (0.04, 0.08, 0.12, 0.18)

# Assignment thresholds baked into generated features and labels.
_IOU_FG = 0.5
_IOU_BG = 0.3


@dataclass
class SyntheticConfig:
    num_classes: int = 3
    images_per_split: dict = field(
        default_factory=lambda: {"train": 200, "val": 20, "test": 50}
    )
    objects_per_image: tuple[int, int] = (1, 3)
    d: int = 16
    s: int = 28
    f: int = 32
    separation: float = 10.0
    noise: float = 1.0
    seed: int = 0
    image_width: int = 160
    image_height: int = 120
    proposals_per_gt: int = 4
    background_rois: int = 3

    def validate(self) -> None:
        if self.num_classes < 1:
            raise ConfigError("num_classes must be >= 1")
        if min(self.d, self.s, self.f) < 1:
            raise ConfigError("feature dims d, s, f must be >= 1")
        if not self.images_per_split:
            raise ConfigError("images_per_split must name at least one split")
        lo, hi = self.objects_per_image
        if not (1 <= lo <= hi):
            raise ConfigError(f"bad objects_per_image range {self.objects_per_image}")
        if self.separation < 0 or self.noise < 0:
            raise ConfigError("separation and noise must be >= 0")
        if min(self.image_width, self.image_height) < 32:
            raise ConfigError("image extent must be at least 32 px")

    @classmethod
    def from_dict(cls, doc: dict) -> "SyntheticConfig":
        known = {f.name for f in cls.__dataclass_fields__.values()}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown synthetic config keys: {sorted(unknown)}")
        cfg = cls(**doc)
        if "objects_per_image" in doc:
            cfg.objects_per_image = tuple(doc["objects_per_image"])
        cfg.validate()
        return cfg


def _rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=key))


def _class_directions(num_classes: int, dim: int, rng: np.random.Generator) -> np.ndarray:
    """One unit direction per class; standard basis when it fits."""
    if num_classes <= dim:
        dirs = np.zeros((num_classes, dim))
        dirs[np.arange(num_classes), np.arange(num_classes)] = 1.0
        return dirs
    dirs = rng.normal(size=(num_classes, dim))
    return dirs / np.linalg.norm(dirs, axis=1, keepdims=True)


def _ellipse_mask(width: int, height: int, box: np.ndarray) -> np.ndarray:
    """Pixel-center rasterization of the ellipse inscribed in ``box``."""
    x1, y1, x2, y2 = box
    cx, cy = (x1 + x2) / 2.0, (y1 + y2) / 2.0
    rx, ry = (x2 - x1) / 2.0, (y2 - y1) / 2.0
    ys = np.arange(height) + 0.5
    xs = np.arange(width) + 0.5
    u = (xs - cx) / rx
    v = (ys - cy) / ry
    return (v[:, None] ** 2 + u[None, :] ** 2) <= 1.0


def _grid_sample_indices(box: np.ndarray, side: int, width: int, height: int):
    """Image pixel indices sampled by each grid cell (matches mask_to_grid)."""
    x1, y1, x2, y2 = box
    ys = y1 + (np.arange(side) + 0.5) * (y2 - y1) / side
    xs = x1 + (np.arange(side) + 0.5) * (x2 - x1) / side
    yi = np.clip(np.floor(ys).astype(int), 0, height - 1)
    xi = np.clip(np.floor(xs).astype(int), 0, width - 1)
    return yi, xi


def _sample_box(rng: np.random.Generator, width: int, height: int) -> np.ndarray:
    w = rng.uniform(0.25, 0.5) * width
    h = rng.uniform(0.25, 0.5) * height
    x1 = rng.uniform(0.0, width - w)
    y1 = rng.uniform(0.0, height - h)
    return np.array([x1, y1, x1 + w, y1 + h])


# Instances within one image are kept nearly disjoint so that visible-part
# ground truth stays close to the full ellipse.
_MAX_INSTANCE_OVERLAP = 0.15


def _sample_instance_box(
    rng: np.random.Generator, width: int, height: int, existing: list[np.ndarray]
) -> np.ndarray | None:
    from ..boxes import iou_matrix

    for _ in range(40):
        box = _sample_box(rng, width, height)
        if not existing:
            return box
        ious = iou_matrix(box[None, :], np.stack(existing))[0]
        if ious.max() < _MAX_INSTANCE_OVERLAP:
            return box
    return None


def _jitter_box(
    rng: np.random.Generator, box: np.ndarray, magnitude: float, width: int, height: int
) -> np.ndarray:
    w = box[2] - box[0]
    h = box[3] - box[1]
    dx = magnitude * w * rng.uniform(-1.0, 1.0)
    dy = magnitude * h * rng.uniform(-1.0, 1.0)
    sw = np.exp(magnitude * rng.uniform(-1.0, 1.0))
    sh = np.exp(magnitude * rng.uniform(-1.0, 1.0))
    cx = (box[0] + box[2]) / 2.0 + dx
    cy = (box[1] + box[3]) / 2.0 + dy
    nw, nh = w * sw / 2.0, h * sh / 2.0
    out = np.array([cx - nw, cy - nh, cx + nw, cy + nh])
    out[0::2] = np.clip(out[0::2], 0.0, width)
    out[1::2] = np.clip(out[1::2], 0.0, height)
    return out


def _max_iou(box: np.ndarray, gt_boxes: list[np.ndarray]) -> tuple[float, int]:
    from ..boxes import iou_matrix

    if not gt_boxes:
        return 0.0, -1
    ious = iou_matrix(box[None, :], np.stack(gt_boxes))[0]
    best = int(np.argmax(ious))
    return float(ious[best]), best


def _assignment(iou: float, gt_class: int) -> int:
    if iou >= _IOU_FG:
        return gt_class
    if iou < _IOU_BG:
        return LABEL_BACKGROUND
    return LABEL_IGNORED


def generate_synthetic(config: SyntheticConfig, out_path) -> DatasetIndex:
    """Write a complete synthetic feature store and return its manifest."""
    config.validate()
    n_classes = config.num_classes
    width, height = config.image_width, config.image_height

    det_dirs = _class_directions(n_classes, config.d, _rng(config.seed, 0))
    pix_dirs = _class_directions(n_classes, config.f, _rng(config.seed, 1))
    det_means = config.separation * det_dirs
    pix_means = config.separation * pix_dirs

    splits = list(config.images_per_split)
    images = []
    image_id = 0
    for split in splits:
        for _ in range(int(config.images_per_split[split])):
            images.append(ImageRecord(id=image_id, width=width, height=height, split=split))
            image_id += 1

    index = DatasetIndex(
        num_classes=n_classes,
        class_names=[f"object_{c}" for c in range(1, n_classes + 1)],
        images=images,
        d=config.d,
        s=config.s,
        f=config.f,
        splits=splits,
    )

    def det_feature(rng, class_label: int) -> np.ndarray:
        mean = det_means[class_label - 1] if class_label >= 1 else 0.0
        return (mean + config.noise * rng.normal(size=config.d)).astype(np.float32)

    def grid_tensor(rng, member_class: np.ndarray) -> np.ndarray:
        # member_class: (s, s) int array, 0 for background cells
        s = config.s
        grid = config.noise * rng.normal(size=(s, s, config.f))
        for c in range(1, n_classes + 1):
            sel = member_class == c
            if sel.any():
                grid[sel] += pix_means[c - 1]
        return grid.astype(np.float32)

    writer = DatasetWriter(out_path, index)
    try:
        for split_idx, split in enumerate(splits):
            # classes cycle per split so every class appears even in tiny sets
            class_counter = 0
            for img in index.images_in(split):
                rng = _rng(config.seed, 2, split_idx, img.id)

                # ground-truth instances, painted back to front so overlap
                # pixels belong to exactly one instance (the later one)
                n_objects = int(rng.integers(config.objects_per_image[0],
                                             config.objects_per_image[1] + 1))
                gt_boxes: list[np.ndarray] = []
                gt_classes: list[int] = []
                for _ in range(n_objects):
                    box = _sample_instance_box(rng, width, height, gt_boxes)
                    if box is None:
                        continue
                    gt_boxes.append(box)
                    gt_classes.append(class_counter % n_classes + 1)
                    class_counter += 1
                instance_map = np.zeros((height, width), dtype=int)  # 0 = background
                for k, box in enumerate(gt_boxes, start=1):
                    instance_map[_ellipse_mask(width, height, box)] = k
                gt_masks = [instance_map == k for k in range(1, len(gt_boxes) + 1)]
                for box, cls, mask in zip(gt_boxes, gt_classes, gt_masks):
                    writer.add_annotation(
                        split,
                        InstanceAnnotation(
                            image_id=img.id, class_id=cls, box=box, mask=rle_encode(mask)
                        ),
                    )

                class_map = np.zeros((height, width), dtype=int)
                for cls, mask in zip(gt_classes, gt_masks):
                    class_map[mask] = cls

                def cell_membership(box: np.ndarray) -> np.ndarray:
                    yi, xi = _grid_sample_indices(box, config.s, width, height)
                    return class_map[np.ix_(yi, xi)]

                # RoIs: ground-truth boxes only in train, then jittered
                # proposals and rejected-overlap background boxes everywhere
                rois: list[RoIFeature] = []
                if split == "train":
                    for box, cls in zip(gt_boxes, gt_classes):
                        rois.append(
                            RoIFeature(
                                image_id=img.id,
                                box=box.copy(),
                                feature=det_feature(rng, cls),
                                source=SOURCE_GROUND_TRUTH,
                                label=cls,
                                iou=1.0,
                            )
                        )
                for gi, gt_box in enumerate(gt_boxes):
                    for p in range(config.proposals_per_gt):
                        magnitude = _JITTER_MAGNITUDES[p % len(_JITTER_MAGNITUDES)]
                        box = _jitter_box(rng, gt_box, magnitude, width, height)
                        iou, best = _max_iou(box, gt_boxes)
                        label = _assignment(iou, gt_classes[best] if best >= 0 else 0)
                        feat_class = label if label >= 1 else 0
                        rois.append(
                            RoIFeature(
                                image_id=img.id,
                                box=box,
                                feature=det_feature(rng, feat_class),
                                source=SOURCE_RPN_PROPOSAL,
                                label=label,
                                iou=iou,
                            )
                        )
                for _ in range(config.background_rois):
                    for _attempt in range(50):
                        box = _sample_box(rng, width, height)
                        iou, _ = _max_iou(box, gt_boxes)
                        if iou < _IOU_BG:
                            break
                    else:
                        continue
                    rois.append(
                        RoIFeature(
                            image_id=img.id,
                            box=box,
                            feature=det_feature(rng, 0),
                            source=SOURCE_RPN_PROPOSAL,
                            label=LABEL_BACKGROUND,
                            iou=iou,
                        )
                    )
                for roi in rois:
                    writer.add_roi(split, roi)

                # ground-truth grids (training signal and GT-box evaluation)
                for box, cls, mask in zip(gt_boxes, gt_classes, gt_masks):
                    mask_grid = mask_to_grid(mask, box, config.s)
                    member = np.where(mask_grid, cls, 0)
                    writer.add_grid(
                        split,
                        SegFeatureGrid(
                            image_id=img.id,
                            box=box.copy(),
                            class_id=cls,
                            grid=grid_tensor(rng, member),
                            mask_grid=mask_grid,
                            mask_fullres=rle_encode(mask),
                            roi_index=GRID_AT_GT_BOX,
                        ),
                    )

                # per-RoI grids for detection-driven mask prediction
                if split != "train":
                    for roi_index, roi in enumerate(rois):
                        writer.add_grid(
                            split,
                            SegFeatureGrid(
                                image_id=img.id,
                                box=roi.box.copy(),
                                class_id=0,
                                grid=grid_tensor(rng, cell_membership(roi.box)),
                                roi_index=roi_index,
                            ),
                        )
    finally:
        writer.close()
    return load_dataset(out_path)
