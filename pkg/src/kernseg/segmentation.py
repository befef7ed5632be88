"""Online segmentation: per-pixel kernel classifiers over mask-head grids.

Each s x s x f grid flattens into s*s pixel feature vectors; pixels under
the ground-truth mask are positives for that grid's class, the rest are
negatives for the same class, and nothing contributes to other classes.
Pools are subsampled by a fixed factor per class and polarity before
training. At prediction time the s x s score map is bilinearly resampled
to the detection box and thresholded into an image-resolution bitmap.
"""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass
from math import ceil, floor
from typing import Iterable

import numpy as np

from sklearn.base import BaseEstimator

from .detection import DetectionResult
from .exceptions import ConfigError, InputError
from .falkon import FalkonClassifier
from .store.schema import SegFeatureGrid


@dataclass
class InstanceMaskResult:
    detection: DetectionResult
    mask: np.ndarray  # bool, image resolution, foreground only inside the box


@dataclass
class PixelSampleCounts:
    pre_positive: int = 0
    pre_negative: int = 0
    kept_positive: int = 0
    kept_negative: int = 0


def extract_pixel_samples(grid: SegFeatureGrid) -> tuple[np.ndarray, np.ndarray]:
    """Split one ground-truth grid into (positive, negative) pixel features."""
    if grid.class_id < 1:
        raise InputError(
            f"grid has class_id {grid.class_id}; pixel samples come from "
            "ground-truth grids only"
        )
    if grid.mask_grid is None:
        raise InputError("grid is missing its ground-truth mask")
    s = grid.grid.shape[0]
    flat = grid.grid.reshape(s * s, -1)
    fg = grid.mask_grid.reshape(-1)
    return flat[fg], flat[~fg]


def subsample(samples: np.ndarray, r: float, seed: int) -> np.ndarray:
    """Keep a uniform ceil(r * count) subset, without replacement.

    Ceiling rounding means any r > 0 keeps at least one sample from a
    nonempty set. Kept rows stay in their original relative order.
    """
    if not (0.0 < r <= 1.0):
        raise ConfigError(f"sampling factor must be in (0, 1], got {r}")
    samples = np.asarray(samples)
    count = samples.shape[0]
    if count == 0:
        return samples
    kept = ceil(r * count)
    if kept >= count:
        return samples
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(count, size=kept, replace=False))
    return samples[idx]


def _seed_for(seed: int, *key: int) -> int:
    return int(np.random.SeedSequence(seed, spawn_key=key).generate_state(1)[0])


def bilinear_resample_to_box(
    score_map: np.ndarray, box, width: int, height: int
) -> tuple[np.ndarray, int, int]:
    """Resample an s x s score map onto the pixel raster under ``box``.

    Grid cell centers sit at fractional positions (j + 0.5) / s across the
    box; target pixel centers are sampled bilinearly with edge clamping.
    Returns (scores, x0, y0) where scores covers pixels
    [y0, y0 + h) x [x0, x0 + w) inside the clipped box.
    """
    score_map = np.asarray(score_map, dtype=np.float64)
    if score_map.ndim != 2 or score_map.shape[0] != score_map.shape[1]:
        raise InputError(f"score map must be square, got {score_map.shape}")
    s = score_map.shape[0]
    x1, y1, x2, y2 = (float(v) for v in box)
    x1, x2 = max(x1, 0.0), min(x2, float(width))
    y1, y2 = max(y1, 0.0), min(y2, float(height))
    if not (x2 > x1 and y2 > y1):
        return np.zeros((0, 0)), 0, 0
    x0, y0 = int(floor(x1)), int(floor(y1))
    x3, y3 = int(ceil(x2)), int(ceil(y2))
    xs = np.arange(x0, x3) + 0.5
    ys = np.arange(y0, y3) + 0.5
    u = np.clip((xs - x1) / (x2 - x1) * s - 0.5, 0.0, s - 1.0)
    v = np.clip((ys - y1) / (y2 - y1) * s - 0.5, 0.0, s - 1.0)
    j0 = np.minimum(u.astype(int), s - 2) if s > 1 else np.zeros(u.shape, dtype=int)
    i0 = np.minimum(v.astype(int), s - 2) if s > 1 else np.zeros(v.shape, dtype=int)
    fu = u - j0
    fv = v - i0
    if s == 1:
        return np.full((ys.size, xs.size), float(score_map[0, 0])), x0, y0
    top = score_map[i0][:, j0] * (1 - fu)[None, :] + score_map[i0][:, j0 + 1] * fu[None, :]
    bottom = (
        score_map[i0 + 1][:, j0] * (1 - fu)[None, :]
        + score_map[i0 + 1][:, j0 + 1] * fu[None, :]
    )
    return top * (1 - fv)[:, None] + bottom * fv[:, None], x0, y0


class OnlineSegmenter(BaseEstimator):
    """Bank of per-class per-pixel kernel classifiers.

    fit() pools pixel samples per class over ground-truth grids,
    subsamples each polarity by ``sampling_factor``, and trains one
    classifier per class. predict_mask() turns a grid plus a detection
    box into a full-resolution binary mask confined to the box.
    """

    def __init__(
        self,
        num_classes: int,
        sigma: float = 4.0,
        lam: float = 1e-5,
        n_centers: int = 300,
        max_iter: int = 20,
        tol: float = 1e-10,
        sampling_factor: float = 0.3,
        mask_threshold: float = 0.0,
        seed: int = 0,
    ):
        self.num_classes = num_classes
        self.sigma = sigma
        self.lam = lam
        self.n_centers = n_centers
        self.max_iter = max_iter
        self.tol = tol
        self.sampling_factor = sampling_factor
        self.mask_threshold = mask_threshold
        self.seed = seed

    def fit(self, grids: Iterable[SegFeatureGrid]):
        pos_pool: dict[int, list[np.ndarray]] = {c: [] for c in range(1, self.num_classes + 1)}
        neg_pool: dict[int, list[np.ndarray]] = {c: [] for c in range(1, self.num_classes + 1)}
        grid_side = None
        for grid in grids:
            if grid.class_id == 0:
                continue  # RoI-linked grids carry no training signal
            pos, neg = extract_pixel_samples(grid)
            pos_pool[grid.class_id].append(pos)
            neg_pool[grid.class_id].append(neg)
            grid_side = grid.grid.shape[0]
        stack = lambda rows: np.vstack(rows) if rows else np.zeros((0, 0))
        self.fit_pools(
            {c: stack(pos_pool[c]) for c in pos_pool},
            {c: stack(neg_pool[c]) for c in neg_pool},
        )
        self.grid_side_ = grid_side
        return self

    def fit_pools(self, pos_by_class: dict, neg_by_class: dict):
        """Train from already-pooled per-class pixel features.

        Exists so parameter sweeps can extract pixel pools once and retrain
        many times; ``fit`` delegates here.
        """
        if self.num_classes < 1:
            raise ConfigError("num_classes must be >= 1")
        if not (0.0 < self.sampling_factor <= 1.0):
            raise ConfigError(
                f"sampling_factor must be in (0, 1], got {self.sampling_factor}"
            )
        self.grid_side_ = None
        self.models_ = {}
        self.sample_counts_ = {}
        self.train_seconds_ = {}
        r = float(self.sampling_factor)
        for c in range(1, self.num_classes + 1):
            pos = np.asarray(pos_by_class.get(c, np.zeros((0, 0))))
            neg = np.asarray(neg_by_class.get(c, np.zeros((0, 0))))
            counts = PixelSampleCounts(pre_positive=pos.shape[0], pre_negative=neg.shape[0])
            if pos.shape[0] == 0 or neg.shape[0] == 0:
                warnings.warn(
                    f"class {c}: missing a pixel polarity "
                    f"({pos.shape[0]} positive, {neg.shape[0]} negative), skipped"
                )
                self.models_[c] = None
                self.sample_counts_[c] = counts
                continue
            t0 = time.perf_counter()
            pos = subsample(pos, r, _seed_for(self.seed, c, 0))
            neg = subsample(neg, r, _seed_for(self.seed, c, 1))
            counts.kept_positive = pos.shape[0]
            counts.kept_negative = neg.shape[0]
            X = np.vstack([pos, neg]).astype(np.float64)
            y = np.concatenate([np.ones(pos.shape[0]), -np.ones(neg.shape[0])])
            model = FalkonClassifier(
                sigma=self.sigma,
                lam=self.lam,
                n_centers=self.n_centers,
                max_iter=self.max_iter,
                tol=self.tol,
                seed=_seed_for(self.seed, c, 2),
            )
            self.models_[c] = model.fit(X, y)
            self.sample_counts_[c] = counts
            self.train_seconds_[c] = time.perf_counter() - t0
        return self

    def predict_mask(
        self,
        grid: np.ndarray,
        class_id: int,
        box,
        image_width: int,
        image_height: int,
    ) -> np.ndarray:
        """Image-resolution binary mask for one detection.

        Scores every grid pixel with the class model, resamples the score
        map into the clipped box, and thresholds; everything outside the
        box stays background.
        """
        if not hasattr(self, "models_"):
            raise InputError("segmenter is not fitted")
        model = self.models_.get(class_id)
        if model is None:
            raise InputError(f"no trained mask model for class {class_id}")
        grid = np.asarray(grid)
        if grid.ndim != 3 or grid.shape[0] != grid.shape[1]:
            raise InputError(f"grid must be (s, s, f), got {grid.shape}")
        s = grid.shape[0]
        scores = model.decision_function(
            grid.reshape(s * s, grid.shape[2]).astype(np.float64)
        ).reshape(s, s)
        resampled, x0, y0 = bilinear_resample_to_box(
            scores, box, image_width, image_height
        )
        mask = np.zeros((image_height, image_width), dtype=bool)
        if resampled.size:
            mask[y0 : y0 + resampled.shape[0], x0 : x0 + resampled.shape[1]] = (
                resampled >= self.mask_threshold
            )
        return mask

    def segment_gt_boxes(
        self, grids: Iterable[SegFeatureGrid], image_sizes: dict[int, tuple[int, int]]
    ) -> list[InstanceMaskResult]:
        """Predict masks directly at ground-truth boxes, bypassing detection.

        Grids without a trained class model are skipped with a warning so
        the decoupled evaluation can proceed for the remaining classes.
        """
        results = []
        for grid in grids:
            if grid.class_id == 0:
                continue
            width, height = image_sizes[grid.image_id]
            if self.models_.get(grid.class_id) is None:
                warnings.warn(f"class {grid.class_id}: no mask model, grid skipped")
                continue
            mask = self.predict_mask(grid.grid, grid.class_id, grid.box, width, height)
            detection = DetectionResult(
                image_id=grid.image_id,
                class_id=grid.class_id,
                box=np.asarray(grid.box, dtype=np.float64),
                score=1.0,
                roi_index=grid.roi_index,
            )
            results.append(InstanceMaskResult(detection=detection, mask=mask))
        return results
