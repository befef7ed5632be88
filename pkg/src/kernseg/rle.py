"""Run-length encoding for binary masks, plus mask IoU and grid resampling.

Masks are encoded row-major with uncompressed counts; the first count is
the number of leading zeros (possibly 0), and counts alternate between
background and foreground runs.
"""

from __future__ import annotations

import numpy as np

from .exceptions import InputError


def rle_encode(mask) -> dict:
    """Encode a 2-D binary mask as {"h", "w", "counts"}."""
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise InputError(f"mask must be 2-D, got shape {mask.shape}")
    h, w = mask.shape
    flat = mask.reshape(-1).astype(bool)
    if flat.size == 0:
        return {"h": int(h), "w": int(w), "counts": []}
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate([[0], change, [flat.size]])
    counts = np.diff(bounds).tolist()
    if flat[0]:
        counts = [0] + counts
    return {"h": int(h), "w": int(w), "counts": counts}


def rle_decode(rle: dict) -> np.ndarray:
    h, w = int(rle["h"]), int(rle["w"])
    counts = list(rle["counts"])
    total = sum(counts)
    if total != h * w and not (h * w == 0 and total == 0):
        raise InputError(f"RLE counts sum to {total}, expected {h * w}")
    flat = np.zeros(h * w, dtype=bool)
    pos = 0
    value = False
    for count in counts:
        if value:
            flat[pos : pos + count] = True
        pos += count
        value = not value
    return flat.reshape(h, w)


def rle_area(rle: dict) -> int:
    """Foreground pixel count, straight from the odd-position counts."""
    return int(sum(rle["counts"][1::2]))


def iou_mask(a: dict, b: dict) -> float:
    """IoU between two RLE masks of identical size; empty union gives 0."""
    if (a["h"], a["w"]) != (b["h"], b["w"]):
        raise InputError(
            f"mask sizes differ: {(a['h'], a['w'])} vs {(b['h'], b['w'])}"
        )
    return iou_mask_arrays(rle_decode(a), rle_decode(b))


def iou_mask_arrays(a: np.ndarray, b: np.ndarray) -> float:
    if a.shape != b.shape:
        raise InputError(f"mask shapes differ: {a.shape} vs {b.shape}")
    inter = int(np.count_nonzero(a & b))
    union = int(np.count_nonzero(a | b))
    return inter / union if union else 0.0


def mask_to_grid(mask: np.ndarray, box, side: int) -> np.ndarray:
    """Nearest-neighbor resample of the box crop of ``mask`` to side x side.

    Cell (i, j) samples the image pixel under the cell center; this keeps
    values binary and is exactly reproducible.
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim != 2:
        raise InputError(f"mask must be 2-D, got shape {mask.shape}")
    x1, y1, x2, y2 = (float(v) for v in box)
    if not (x2 > x1 and y2 > y1):
        raise InputError(f"degenerate box {box!r}")
    h, w = mask.shape
    ys = y1 + (np.arange(side) + 0.5) * (y2 - y1) / side
    xs = x1 + (np.arange(side) + 0.5) * (x2 - x1) / side
    yi = np.clip(np.floor(ys).astype(int), 0, h - 1)
    xi = np.clip(np.floor(xs).astype(int), 0, w - 1)
    return mask[np.ix_(yi, xi)]
