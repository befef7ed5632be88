"""Average precision and mAP for boxes and masks, VOC-2010 style.

Detections are ranked per class by descending score; each one greedily
claims the unmatched ground truth with the highest IoU (ties toward the
lower annotation index) provided that IoU meets the threshold. AP is the
area under the precision envelope over all recall points, and mAP is the
unweighted mean over classes that have at least one ground truth.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .boxes import iou_box
from .exceptions import InputError
from .rle import iou_mask_arrays, rle_decode


@dataclass
class ClassResult:
    ap: float
    num_gt: int
    num_det: int
    true_positives: int
    false_positives: int


@dataclass
class EvalReport:
    thresholds: list[float]
    bbox: dict = field(default_factory=dict)  # threshold -> class -> ClassResult
    segm: dict = field(default_factory=dict)
    map_bbox: dict = field(default_factory=dict)  # threshold -> float
    map_segm: dict = field(default_factory=dict)
    num_images: int = 0
    num_gt: int = 0
    num_detections: int = 0
    excluded_classes: list[int] = field(default_factory=list)
    wall_time_s: float = 0.0

    def to_dict(self) -> dict:
        def table(block):
            return {
                f"{thr:g}": {
                    str(c): vars(res) for c, res in sorted(per_class.items())
                }
                for thr, per_class in block.items()
            }

        return {
            "thresholds": self.thresholds,
            "map_bbox": {f"{t:g}": v for t, v in self.map_bbox.items()},
            "map_segm": {f"{t:g}": v for t, v in self.map_segm.items()},
            "per_class_bbox": table(self.bbox),
            "per_class_segm": table(self.segm),
            "num_images": self.num_images,
            "num_gt": self.num_gt,
            "num_detections": self.num_detections,
            "excluded_classes": self.excluded_classes,
            "wall_time_s": self.wall_time_s,
        }

    def to_table(self, label: str = "run", train_time: str | None = None) -> str:
        """Aligned text table: mAP columns per threshold, bbox then segm."""
        columns = ["method"]
        values = [label]
        for thr in self.thresholds:
            pct = int(round(thr * 100))
            columns.append(f"mAP{pct} bbox(%)")
            values.append(f"{100 * self.map_bbox.get(thr, float('nan')):.2f}")
            columns.append(f"mAP{pct} segm(%)")
            segm = self.map_segm.get(thr)
            values.append("-" if segm is None else f"{100 * segm:.2f}")
        columns.append("train time")
        values.append(train_time if train_time is not None else "-")
        widths = [max(len(c), len(v)) for c, v in zip(columns, values)]
        head = " | ".join(c.ljust(w) for c, w in zip(columns, widths))
        rule = "-+-".join("-" * w for w in widths)
        row = " | ".join(v.ljust(w) for v, w in zip(values, widths))
        return "\n".join([head, rule, row])


def average_precision(scores, is_match, num_gt: int) -> float:
    """Area-under-envelope AP from ranked match flags.

    ``scores`` and ``is_match`` describe detections of one class;
    detections are ranked by descending score (stable for ties) before
    accumulating the precision-recall curve.
    """
    if num_gt < 0:
        raise InputError("num_gt must be >= 0")
    scores = np.asarray(scores, dtype=np.float64)
    is_match = np.asarray(is_match, dtype=bool)
    if scores.shape != is_match.shape:
        raise InputError("scores and is_match disagree in shape")
    if num_gt == 0:
        return 0.0
    if scores.size == 0:
        return 0.0
    order = np.argsort(-scores, kind="stable")
    tp = np.cumsum(is_match[order])
    fp = np.cumsum(~is_match[order])
    recall = tp / num_gt
    precision = tp / np.maximum(tp + fp, 1)
    return _envelope_area(recall, precision)


def _envelope_area(recall: np.ndarray, precision: np.ndarray) -> float:
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    for i in range(mpre.size - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    changed = np.flatnonzero(mrec[1:] != mrec[:-1]) + 1
    return float(np.sum((mrec[changed] - mrec[changed - 1]) * mpre[changed]))


def _greedy_match(
    detections: list[dict],
    gts: list[dict],
    iou_threshold: float,
    iou_of,
) -> np.ndarray:
    """Match flags for one class, greedy by descending score."""
    order = sorted(
        range(len(detections)), key=lambda i: (-detections[i]["score"], i)
    )
    gt_by_image: dict[int, list[int]] = {}
    for gi, gt in enumerate(gts):
        gt_by_image.setdefault(gt["image_id"], []).append(gi)
    matched = np.zeros(len(gts), dtype=bool)
    flags = np.zeros(len(detections), dtype=bool)
    for i in order:
        det = detections[i]
        best_iou = 0.0
        best_gi = -1
        for gi in gt_by_image.get(det["image_id"], []):
            iou = iou_of(det, gts[gi])
            if iou > best_iou:
                best_iou = iou
                best_gi = gi
        if best_gi >= 0 and best_iou >= iou_threshold and not matched[best_gi]:
            matched[best_gi] = True
            flags[i] = True
    return flags


def evaluate(
    detections: list[dict],
    ground_truths: list[dict],
    thresholds=(0.5, 0.7),
    with_masks: bool = False,
) -> EvalReport:
    """Score a prediction dump against ground truth.

    Each detection dict carries image_id, class_id, box, score, and
    (when ``with_masks``) an RLE "mask"; each ground truth carries
    image_id, class_id, box, and "mask". Classes with no ground truth are
    excluded from mAP and reported in ``excluded_classes``.
    """
    t0 = time.perf_counter()
    thresholds = [float(t) for t in thresholds]
    classes = sorted(
        {gt["class_id"] for gt in ground_truths}
        | {det["class_id"] for det in detections}
    )
    report = EvalReport(thresholds=thresholds)
    report.num_gt = len(ground_truths)
    report.num_detections = len(detections)
    report.num_images = len(
        {gt["image_id"] for gt in ground_truths}
        | {det["image_id"] for det in detections}
    )

    decoded: dict[int, np.ndarray] = {}

    def decoded_mask(entry: dict, key: int) -> np.ndarray:
        if key not in decoded:
            decoded[key] = rle_decode(entry["mask"])
        return decoded[key]

    def iou_boxes(det, gt):
        return iou_box(det["box"], gt["box"])

    mask_cache_offset = len(detections)

    def iou_masks(det, gt):
        a = decoded_mask(det, det["_idx"])
        b = decoded_mask(gt, mask_cache_offset + gt["_idx"])
        if a.shape != b.shape:
            raise InputError(
                f"mask size mismatch on image {det['image_id']}: "
                f"{a.shape} vs {b.shape}"
            )
        return iou_mask_arrays(a, b)

    for i, det in enumerate(detections):
        det["_idx"] = i
    for i, gt in enumerate(ground_truths):
        gt["_idx"] = i

    tasks = [("bbox", iou_boxes, report.bbox, report.map_bbox)]
    if with_masks:
        tasks.append(("segm", iou_masks, report.segm, report.map_segm))

    for _name, iou_of, block, map_block in tasks:
        for thr in thresholds:
            per_class = {}
            aps = []
            for c in classes:
                dets_c = [d for d in detections if d["class_id"] == c]
                gts_c = [g for g in ground_truths if g["class_id"] == c]
                if not gts_c:
                    if c not in report.excluded_classes:
                        report.excluded_classes.append(c)
                    continue
                flags = _greedy_match(dets_c, gts_c, thr, iou_of)
                scores = np.array([d["score"] for d in dets_c])
                ap = average_precision(scores, flags, len(gts_c))
                per_class[c] = ClassResult(
                    ap=ap,
                    num_gt=len(gts_c),
                    num_det=len(dets_c),
                    true_positives=int(flags.sum()),
                    false_positives=int((~flags).sum()),
                )
                aps.append(ap)
            block[thr] = per_class
            map_block[thr] = float(np.mean(aps)) if aps else 0.0

    for det in detections:
        det.pop("_idx", None)
    for gt in ground_truths:
        gt.pop("_idx", None)
    report.wall_time_s = time.perf_counter() - t0
    return report
