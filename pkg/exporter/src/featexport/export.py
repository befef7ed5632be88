"""Export job: run the network over annotated images and write a store.

For every image the job writes (a) one RoI record per kept RPN proposal,
labeled against the ground truth by the max-IoU rule, plus ground-truth
boxes as additional positive RoIs on training splits; (b) mask-head
grids at ground-truth boxes (with both mask views) on every split, and
per-RoI grids on non-training splits so mask prediction can follow
detections; (c) the instance annotations themselves. Capture dimensions
are fixed by the first record and any later drift aborts the job.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .annotations import AnnotationSet, load_annotations
from .capture import FeatureCapture, build_model
from .rle import mask_to_grid, rle_decode
from .storewriter import SOURCE_GT, SOURCE_RPN, StoreWriter

LABEL_IGNORED = -1
LABEL_BACKGROUND = 0


@dataclass
class ExportJob:
    annotations: str
    images_dir: str
    out_dir: str
    checkpoint: str = "random"
    num_classes: int = 91
    proposals_per_image: int = 300
    min_size: int = 800
    max_size: int = 1333
    iou_fg: float = 0.5
    iou_bg: float = 0.3
    seed: int = 0
    train_splits: tuple = ("train",)
    report: dict = field(default_factory=dict, repr=False)


def _iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    x1 = np.maximum(a[:, None, 0], b[None, :, 0])
    y1 = np.maximum(a[:, None, 1], b[None, :, 1])
    x2 = np.minimum(a[:, None, 2], b[None, :, 2])
    y2 = np.minimum(a[:, None, 3], b[None, :, 3])
    inter = np.clip(x2 - x1, 0, None) * np.clip(y2 - y1, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0)
    return out


def _load_image(path: Path) -> torch.Tensor:
    with Image.open(path) as img:
        arr = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
    return torch.from_numpy(arr).permute(2, 0, 1)


class _DimGuard:
    """Locks capture dimensions on first sight, aborts on drift."""

    def __init__(self):
        self.d = self.s = self.f = None

    def check_box(self, feats: np.ndarray, image_id: int) -> None:
        if self.d is None:
            self.d = feats.shape[1]
        elif feats.shape[1] != self.d:
            raise RuntimeError(
                f"image {image_id}: detection-head capture produced width "
                f"{feats.shape[1]}, expected {self.d} (box head output drifted)"
            )

    def check_grid(self, grids: np.ndarray, image_id: int) -> None:
        _, s1, s2, f = grids.shape
        if self.s is None:
            if s1 != s2:
                raise RuntimeError(
                    f"image {image_id}: mask-head capture is {s1}x{s2}, not square"
                )
            self.s, self.f = s1, f
        elif (s1, s2, f) != (self.s, self.s, self.f):
            raise RuntimeError(
                f"image {image_id}: mask-head capture {s1}x{s2}x{f}, expected "
                f"{self.s}x{self.s}x{self.f} (mask predictor input drifted)"
            )


def export(job: ExportJob) -> Path:
    """Run the job; returns the store directory."""
    t_start = time.perf_counter()
    anns: AnnotationSet = load_annotations(job.annotations)
    model = build_model(
        job.checkpoint,
        num_classes=job.num_classes,
        min_size=job.min_size,
        max_size=job.max_size,
        seed=job.seed,
    )
    capture = FeatureCapture(model, proposals_per_image=job.proposals_per_image)
    guard = _DimGuard()

    # rows are buffered only until the first features fix the capture
    # dimensions; after that the writer streams records image by image
    writer = None
    pending = []
    image_times = {}

    def flush(rows_list):
        for rows in rows_list:
            for split, image_id, box, feat, source, label, iou in rows["rois"]:
                writer.add_roi(split, image_id, box, feat, source, label, iou)
            for split, image_id, box, class_id, grid, mask_grid, mask_rle in rows["gt_grids"]:
                writer.add_gt_grid(split, image_id, box, class_id, grid, mask_grid, mask_rle)
            for split, image_id, box, roi_index, grid in rows["roi_grids"]:
                writer.add_roi_grid(split, image_id, box, roi_index, grid)
            for split, image_id, class_id, box, mask_rle in rows["annotations"]:
                writer.add_annotation(split, image_id, class_id, box, mask_rle)

    for image in anns.images:
        t_img = time.perf_counter()
        tensor = _load_image(Path(job.images_dir) / image.file)
        if tensor.shape[1] != image.height or tensor.shape[2] != image.width:
            raise RuntimeError(
                f"image {image.id}: file is {tensor.shape[2]}x{tensor.shape[1]}, "
                f"annotations say {image.width}x{image.height}"
            )
        ctx = capture.run(tensor)

        instances = anns.by_image(image.id)
        gt_boxes = (
            np.array([inst.box for inst in instances], dtype=np.float64)
            if instances
            else np.zeros((0, 4))
        )

        proposals = ctx.proposals.cpu().numpy().astype(np.float64)
        proposals[:, 0::2] = np.clip(proposals[:, 0::2], 0, image.width)
        proposals[:, 1::2] = np.clip(proposals[:, 1::2], 0, image.height)
        ok = (proposals[:, 2] > proposals[:, 0]) & (proposals[:, 3] > proposals[:, 1])
        proposals = proposals[ok]

        labels = np.full(proposals.shape[0], LABEL_BACKGROUND, dtype=int)
        ious = np.zeros(proposals.shape[0])
        if gt_boxes.shape[0] and proposals.shape[0]:
            matrix = _iou_matrix(proposals, gt_boxes)
            best = matrix.argmax(axis=1)
            ious = matrix[np.arange(proposals.shape[0]), best]
            for i, (iou, gi) in enumerate(zip(ious, best)):
                if iou >= job.iou_fg:
                    labels[i] = instances[gi].class_id
                elif iou >= job.iou_bg:
                    labels[i] = LABEL_IGNORED

        is_train = image.split in job.train_splits
        rows = {"rois": [], "gt_grids": [], "roi_grids": [], "annotations": []}

        if proposals.shape[0]:
            feats = ctx.box_features(torch.from_numpy(proposals).float())
            guard.check_box(feats, image.id)
            for box, feat, label, iou in zip(proposals, feats, labels, ious):
                rows["rois"].append(
                    (image.split, image.id, box, feat, SOURCE_RPN, label, iou)
                )

        if instances:
            gt_feats = ctx.box_features(torch.from_numpy(gt_boxes).float())
            guard.check_box(gt_feats, image.id)
            gt_grids = ctx.mask_grids(torch.from_numpy(gt_boxes).float())
            guard.check_grid(gt_grids, image.id)
            for inst, feat, grid in zip(instances, gt_feats, gt_grids):
                if is_train:
                    rows["rois"].append(
                        (image.split, image.id, np.asarray(inst.box), feat,
                         SOURCE_GT, inst.class_id, 1.0)
                    )
                mask_full = rle_decode(inst.mask)
                rows["gt_grids"].append(
                    (image.split, image.id, np.asarray(inst.box), inst.class_id,
                     grid, mask_to_grid(mask_full, inst.box, grid.shape[0]), inst.mask)
                )
                rows["annotations"].append(
                    (image.split, image.id, inst.class_id, np.asarray(inst.box), inst.mask)
                )

        if not is_train and proposals.shape[0]:
            roi_grids = ctx.mask_grids(torch.from_numpy(proposals).float())
            guard.check_grid(roi_grids, image.id)
            for roi_index, (box, grid) in enumerate(zip(proposals, roi_grids)):
                rows["roi_grids"].append((image.split, image.id, box, roi_index, grid))

        if writer is None and guard.d is not None and guard.s is not None:
            writer = StoreWriter(
                job.out_dir,
                class_names=anns.class_names,
                images=[
                    {"id": im.id, "width": im.width, "height": im.height, "split": im.split}
                    for im in anns.images
                ],
                d=guard.d,
                s=guard.s,
                f=guard.f,
                splits=anns.splits(),
            )
            flush(pending)
            pending = []
        if writer is None:
            pending.append(rows)
        else:
            flush([rows])
        image_times[image.id] = time.perf_counter() - t_img

    if writer is None:
        raise RuntimeError("no features captured: every image was empty")
    writer.close()

    job.report = {
        "dims": {"d": guard.d, "s": guard.s, "f": guard.f},
        "per_image_seconds": image_times,
        "total_seconds": time.perf_counter() - t_start,
        "checkpoint": job.checkpoint,
        "proposals_per_image": job.proposals_per_image,
    }
    with open(Path(job.out_dir) / "export_report.json", "w") as fh:
        json.dump(job.report, fh, indent=1, sort_keys=True)
    return Path(job.out_dir)
