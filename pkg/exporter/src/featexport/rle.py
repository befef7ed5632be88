"""Mask helpers matching the feature-store conventions.

Run-length counts are row-major and start with the background run; the
grid resample picks the image pixel under each cell center, which is the
relationship the store validator enforces between the two mask views.
"""

from __future__ import annotations

import numpy as np


def rle_encode(mask: np.ndarray) -> dict:
    mask = np.asarray(mask, dtype=bool)
    h, w = mask.shape
    flat = mask.reshape(-1)
    if flat.size == 0:
        return {"h": int(h), "w": int(w), "counts": []}
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate([[0], change, [flat.size]])
    counts = np.diff(bounds).tolist()
    if flat[0]:
        counts = [0] + counts
    return {"h": int(h), "w": int(w), "counts": counts}


def rle_decode(rle: dict) -> np.ndarray:
    flat = np.zeros(rle["h"] * rle["w"], dtype=bool)
    pos, value = 0, False
    for count in rle["counts"]:
        if value:
            flat[pos : pos + count] = True
        pos += count
        value = not value
    return flat.reshape(rle["h"], rle["w"])


def mask_to_grid(mask: np.ndarray, box, side: int) -> np.ndarray:
    x1, y1, x2, y2 = (float(v) for v in box)
    h, w = mask.shape
    ys = y1 + (np.arange(side) + 0.5) * (y2 - y1) / side
    xs = x1 + (np.arange(side) + 0.5) * (x2 - x1) / side
    yi = np.clip(np.floor(ys).astype(int), 0, h - 1)
    xi = np.clip(np.floor(xs).astype(int), 0, w - 1)
    return mask[np.ix_(yi, xi)]
