"""Box geometry: IoU, clipping, delta parameterization, and greedy NMS.

Boxes are (x1, y1, x2, y2) in continuous pixel coordinates with
x2 > x1 and y2 > y1; width is x2 - x1 with no +1 convention.
"""

from __future__ import annotations

import numpy as np

from .exceptions import InputError


def as_boxes(boxes, name: str = "boxes") -> np.ndarray:
    """Coerce to a (k, 4) float64 array of finite coordinates."""
    boxes = np.asarray(boxes, dtype=np.float64)
    if boxes.ndim == 1 and boxes.shape == (4,):
        boxes = boxes[None, :]
    if boxes.ndim != 2 or boxes.shape[1] != 4:
        raise InputError(f"{name} must have shape (k, 4), got {boxes.shape}")
    if boxes.size and not np.isfinite(boxes).all():
        raise InputError(f"{name} contains NaN or Inf")
    return boxes


def box_area(boxes: np.ndarray) -> np.ndarray:
    boxes = as_boxes(boxes)
    return np.maximum(boxes[:, 2] - boxes[:, 0], 0.0) * np.maximum(
        boxes[:, 3] - boxes[:, 1], 0.0
    )


def iou_matrix(a, b) -> np.ndarray:
    """Pairwise IoU between two box sets, shape (len(a), len(b))."""
    a = as_boxes(a, "a")
    b = as_boxes(b, "b")
    if a.shape[0] == 0 or b.shape[0] == 0:
        return np.zeros((a.shape[0], b.shape[0]))
    x1 = np.maximum(a[:, None, 0], b[None, :, 0])
    y1 = np.maximum(a[:, None, 1], b[None, :, 1])
    x2 = np.minimum(a[:, None, 2], b[None, :, 2])
    y2 = np.minimum(a[:, None, 3], b[None, :, 3])
    inter = np.clip(x2 - x1, 0.0, None) * np.clip(y2 - y1, 0.0, None)
    union = box_area(a)[:, None] + box_area(b)[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0)
    return out


def iou_box(a, b) -> float:
    """IoU of a single box pair."""
    return float(iou_matrix(np.asarray(a)[None, :], np.asarray(b)[None, :])[0, 0])


def clip_boxes(boxes, width: float, height: float) -> np.ndarray:
    boxes = as_boxes(boxes).copy()
    boxes[:, 0::2] = np.clip(boxes[:, 0::2], 0.0, float(width))
    boxes[:, 1::2] = np.clip(boxes[:, 1::2], 0.0, float(height))
    return boxes


def compute_bbox_targets(roi_boxes, gt_boxes) -> np.ndarray:
    """Delta targets (tx, ty, tw, th) mapping each RoI onto its ground truth.

    tx = (gcx - pcx) / pw, ty = (gcy - pcy) / ph,
    tw = log(gw / pw),     th = log(gh / ph).
    """
    p = as_boxes(roi_boxes, "roi_boxes")
    g = as_boxes(gt_boxes, "gt_boxes")
    if p.shape != g.shape:
        raise InputError(f"box sets differ in shape: {p.shape} vs {g.shape}")
    pw = p[:, 2] - p[:, 0]
    ph = p[:, 3] - p[:, 1]
    gw = g[:, 2] - g[:, 0]
    gh = g[:, 3] - g[:, 1]
    if np.any(pw <= 0) or np.any(ph <= 0) or np.any(gw <= 0) or np.any(gh <= 0):
        raise InputError("boxes must have positive width and height")
    tx = ((g[:, 0] + g[:, 2]) - (p[:, 0] + p[:, 2])) / (2.0 * pw)
    ty = ((g[:, 1] + g[:, 3]) - (p[:, 1] + p[:, 3])) / (2.0 * ph)
    tw = np.log(gw / pw)
    th = np.log(gh / ph)
    return np.stack([tx, ty, tw, th], axis=1)


def apply_bbox_deltas(boxes, deltas) -> np.ndarray:
    """Exact inverse of ``compute_bbox_targets``."""
    p = as_boxes(boxes, "boxes")
    deltas = np.asarray(deltas, dtype=np.float64)
    if deltas.shape != p.shape:
        raise InputError(f"deltas must have shape {p.shape}, got {deltas.shape}")
    pw = p[:, 2] - p[:, 0]
    ph = p[:, 3] - p[:, 1]
    if np.any(pw <= 0) or np.any(ph <= 0):
        raise InputError("boxes must have positive width and height")
    cx = (p[:, 0] + p[:, 2]) / 2.0 + deltas[:, 0] * pw
    cy = (p[:, 1] + p[:, 3]) / 2.0 + deltas[:, 1] * ph
    w = pw * np.exp(deltas[:, 2])
    h = ph * np.exp(deltas[:, 3])
    return np.stack([cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0], axis=1)


def nms(boxes, scores, iou_threshold: float) -> np.ndarray:
    """Greedy non-maximum suppression; returns kept indices by descending score.

    A box is suppressed when its IoU with an already kept box exceeds
    ``iou_threshold``. Score ties break toward the earlier index, which
    keeps the result deterministic.
    """
    boxes = as_boxes(boxes)
    scores = np.asarray(scores, dtype=np.float64).ravel()
    if scores.shape[0] != boxes.shape[0]:
        raise InputError("scores and boxes disagree in length")
    if not 0.0 < float(iou_threshold) < 1.0:
        raise InputError(f"iou_threshold must be in (0, 1), got {iou_threshold}")
    if boxes.shape[0] == 0:
        return np.zeros(0, dtype=np.int64)
    order = np.argsort(-scores, kind="stable")
    keep = []
    suppressed = np.zeros(boxes.shape[0], dtype=bool)
    ious = iou_matrix(boxes, boxes)
    for i in order:
        if suppressed[i]:
            continue
        keep.append(i)
        suppressed |= ious[i] > iou_threshold
    return np.asarray(keep, dtype=np.int64)
