"""Online detection: per-class kernel classifiers trained with the
minibootstrap, per-class box refinement, thresholding, and per-class NMS.

The minibootstrap visits a bounded random subset of the negative pool in
batches, keeping only negatives the current model still scores above a
hardness threshold; this keeps per-class training at seconds even when
background regions vastly outnumber positives.
"""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from sklearn.base import BaseEstimator

from .boxes import apply_bbox_deltas, clip_boxes, compute_bbox_targets, iou_matrix, nms
from .exceptions import ConfigError, InputError
from .falkon import FalkonClassifier
from .ridge import RidgeBoxRegressor
from .store.schema import (
    ImageRecord,
    InstanceAnnotation,
    LABEL_BACKGROUND,
    LABEL_IGNORED,
    RoIFeature,
    SOURCE_GROUND_TRUTH,
)


@dataclass
class MinibootstrapConfig:
    """Hard-negative mining schedule.

    ``max_negatives_kept`` defaults to 8 batches' worth; ``hard_threshold``
    of -1.0 keeps margin violators under +1/-1 labels.
    """

    n_batches: int = 15
    batch_size: int = 2000
    hard_threshold: float = -1.0
    max_negatives_kept: int | None = None
    iou_fg: float = 0.5
    iou_bg: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if self.n_batches < 1:
            raise ConfigError(f"n_batches must be >= 1, got {self.n_batches}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not (0.0 <= self.iou_bg < self.iou_fg <= 1.0):
            raise ConfigError(
                f"need 0 <= iou_bg < iou_fg <= 1, got "
                f"iou_bg={self.iou_bg}, iou_fg={self.iou_fg}"
            )
        if self.max_negatives_kept is None:
            self.max_negatives_kept = 8 * self.batch_size
        if self.max_negatives_kept < 1:
            raise ConfigError("max_negatives_kept must be >= 1")


@dataclass
class MinibootstrapStats:
    negatives_visited: int
    negatives_kept: int
    rounds: int
    train_seconds: float
    per_round_kept: list[int] = field(default_factory=list)


@dataclass
class DetectionResult:
    image_id: int
    class_id: int
    box: np.ndarray  # refined, clipped to the image
    score: float
    roi_index: int = -1  # position of the source RoI within its image


def assign_roi_labels(
    rois: list[RoIFeature],
    annotations: list[InstanceAnnotation],
    iou_fg: float = 0.5,
    iou_bg: float = 0.3,
) -> list[RoIFeature]:
    """Label RoIs against ground truth by the max-IoU rule.

    Positive for the class of the max-IoU annotation when IoU >= iou_fg,
    background when the max IoU < iou_bg, ignored in between.
    Ground-truth-sourced RoIs are always positive for their own class.
    Returns the same RoI objects with label, iou, and gt_index updated.
    """
    if not (0.0 <= iou_bg < iou_fg <= 1.0):
        raise ConfigError(f"need 0 <= iou_bg < iou_fg <= 1, got {iou_bg}, {iou_fg}")
    if not rois:
        return []
    gt_boxes = np.stack([ann.box for ann in annotations]) if annotations else None
    roi_boxes = np.stack([roi.box for roi in rois])
    ious = iou_matrix(roi_boxes, gt_boxes) if gt_boxes is not None else None
    for i, roi in enumerate(rois):
        if roi.source == SOURCE_GROUND_TRUTH:
            roi.iou = 1.0
            if ious is not None:
                roi.gt_index = int(np.argmax(ious[i]))
            continue
        if ious is None:
            roi.label = LABEL_BACKGROUND
            roi.iou = 0.0
            roi.gt_index = -1
            continue
        best = int(np.argmax(ious[i]))
        best_iou = float(ious[i, best])
        roi.iou = best_iou
        if best_iou >= iou_fg:
            roi.label = annotations[best].class_id
            roi.gt_index = best
        elif best_iou < iou_bg:
            roi.label = LABEL_BACKGROUND
            roi.gt_index = -1
        else:
            roi.label = LABEL_IGNORED
            roi.gt_index = -1
    return rois


def _round_seed(seed: int, round_index: int) -> int:
    return int(
        np.random.SeedSequence(seed, spawn_key=(round_index,)).generate_state(1)[0]
    )


def minibootstrap_train(
    positives: np.ndarray,
    negative_pool: np.ndarray,
    config: MinibootstrapConfig,
    *,
    sigma: float,
    lam: float,
    n_centers: int,
    max_iter: int = 20,
    tol: float = 1e-10,
    seed: int | None = None,
) -> tuple[FalkonClassifier, MinibootstrapStats]:
    """Train one binary classifier with batched hard-negative mining.

    Shuffles the pool under the seed, takes the first
    ``n_batches * batch_size`` negatives, trains on positives plus the
    first batch, then for each later batch keeps only members the current
    model scores at or above ``hard_threshold``, re-capping the active set
    to the highest-scoring ``max_negatives_kept`` and retraining.
    """
    t0 = time.perf_counter()
    positives = np.asarray(positives, dtype=np.float64)
    negative_pool = np.asarray(negative_pool, dtype=np.float64)
    if positives.ndim != 2 or positives.shape[0] < 1:
        raise InputError("need at least one positive sample")
    if negative_pool.ndim != 2 or negative_pool.shape[0] < 1:
        raise InputError("negative pool is empty")

    if seed is None:
        seed = config.seed
    rng = np.random.default_rng(seed)
    order = rng.permutation(negative_pool.shape[0])
    visited = order[: config.n_batches * config.batch_size]
    batches = [
        visited[i : i + config.batch_size]
        for i in range(0, visited.size, config.batch_size)
    ]

    def fit_model(active_idx: np.ndarray, round_index: int) -> FalkonClassifier:
        X = np.vstack([positives, negative_pool[active_idx]])
        y = np.concatenate(
            [np.ones(positives.shape[0]), -np.ones(active_idx.size)]
        )
        model = FalkonClassifier(
            sigma=sigma,
            lam=lam,
            n_centers=n_centers,
            max_iter=max_iter,
            tol=tol,
            seed=_round_seed(seed, round_index),
        )
        return model.fit(X, y)

    active = batches[0]
    model = fit_model(active, 0)
    per_round_kept = [int(active.size)]
    for round_index, batch in enumerate(batches[1:], start=1):
        scores = model.decision_function(negative_pool[batch])
        hard = batch[scores >= config.hard_threshold]
        active = np.concatenate([active, hard])
        if active.size > config.max_negatives_kept:
            all_scores = model.decision_function(negative_pool[active])
            top = np.argsort(-all_scores, kind="stable")[: config.max_negatives_kept]
            active = active[np.sort(top)]
        model = fit_model(active, round_index)
        per_round_kept.append(int(active.size))

    stats = MinibootstrapStats(
        negatives_visited=int(visited.size),
        negatives_kept=int(active.size),
        rounds=len(batches),
        train_seconds=time.perf_counter() - t0,
        per_round_kept=per_round_kept,
    )
    return model, stats


class OnlineDetector(BaseEstimator):
    """Bank of per-class kernel classifiers plus box refiners.

    fit() consumes RoI features and ground-truth annotations grouped by
    image; predict() scores one image's RoIs, refines and clips boxes,
    thresholds, and applies per-class NMS.
    """

    def __init__(
        self,
        num_classes: int,
        sigma: float = 4.0,
        lam: float = 1e-5,
        n_centers: int = 1000,
        max_iter: int = 20,
        tol: float = 1e-10,
        rls_lam: float = 1e-3,
        bootstrap: MinibootstrapConfig | None = None,
        score_threshold: float = 0.0,
        nms_iou: float = 0.3,
        seed: int = 0,
    ):
        self.num_classes = num_classes
        self.sigma = sigma
        self.lam = lam
        self.n_centers = n_centers
        self.max_iter = max_iter
        self.tol = tol
        self.rls_lam = rls_lam
        self.bootstrap = bootstrap
        self.score_threshold = score_threshold
        self.nms_iou = nms_iou
        self.seed = seed

    def fit(self, rois_by_image: dict, annotations_by_image: dict):
        if self.num_classes < 1:
            raise ConfigError("num_classes must be >= 1")
        if not (0.0 < self.nms_iou < 1.0):
            raise ConfigError(f"nms_iou must be in (0, 1), got {self.nms_iou}")
        cfg = self.bootstrap if self.bootstrap is not None else MinibootstrapConfig()

        feats_by_class: dict[int, list[np.ndarray]] = {
            c: [] for c in range(0, self.num_classes + 1)
        }
        rls_rows: dict[int, list[np.ndarray]] = {c: [] for c in range(1, self.num_classes + 1)}
        rls_targets: dict[int, list[np.ndarray]] = {c: [] for c in range(1, self.num_classes + 1)}

        for image_id, rois in rois_by_image.items():
            anns = annotations_by_image.get(image_id, [])
            assign_roi_labels(rois, anns, cfg.iou_fg, cfg.iou_bg)
            for roi in rois:
                if roi.label == LABEL_IGNORED:
                    continue
                feats_by_class[roi.label].append(roi.feature.astype(np.float64))
                if roi.label >= 1 and roi.gt_index >= 0:
                    rls_rows[roi.label].append(roi.feature.astype(np.float64))
                    rls_targets[roi.label].append(
                        compute_bbox_targets(
                            roi.box[None, :], anns[roi.gt_index].box[None, :]
                        )[0]
                    )

        background = feats_by_class[LABEL_BACKGROUND]
        self.classifiers_ = {}
        self.regressors_ = {}
        self.training_stats_ = {}
        for c in range(1, self.num_classes + 1):
            pos = feats_by_class[c]
            if not pos:
                warnings.warn(f"class {c}: no positive RoIs, classifier skipped")
                self.classifiers_[c] = None
                self.regressors_[c] = None
                continue
            # one-vs-all pool: background plus every other class's positives
            pool = background + [
                f for other, feats in feats_by_class.items()
                if other not in (LABEL_BACKGROUND, c)
                for f in feats
            ]
            if not pool:
                warnings.warn(f"class {c}: empty negative pool, classifier skipped")
                self.classifiers_[c] = None
                self.regressors_[c] = None
                continue
            class_seed = _round_seed(self.seed, 1000 + c)
            model, stats = minibootstrap_train(
                np.vstack(pos),
                np.vstack(pool),
                cfg,
                sigma=self.sigma,
                lam=self.lam,
                n_centers=self.n_centers,
                max_iter=self.max_iter,
                tol=self.tol,
                seed=class_seed,
            )
            self.classifiers_[c] = model
            self.training_stats_[c] = stats
            if rls_rows[c]:
                rows = np.vstack(rls_rows[c])
                targets = np.vstack(rls_targets[c])
            else:
                # positives without matched ground truth cannot teach
                # refinement; fall back to a near-identity regressor
                rows = np.vstack(pos)
                targets = np.zeros((rows.shape[0], 4))
            self.regressors_[c] = RidgeBoxRegressor(lam=self.rls_lam).fit(rows, targets)
        return self

    def predict(self, rois: list[RoIFeature], image: ImageRecord) -> list[DetectionResult]:
        """Score, refine, threshold, and per-class-NMS one image's RoIs."""
        if not hasattr(self, "classifiers_"):
            raise InputError("detector is not fitted")
        if not rois:
            return []
        feats = np.stack([roi.feature for roi in rois]).astype(np.float64)
        roi_boxes = np.stack([roi.box for roi in rois])
        results: list[DetectionResult] = []
        for c in range(1, self.num_classes + 1):
            model = self.classifiers_.get(c)
            if model is None:
                continue
            scores = model.decision_function(feats)
            deltas = self.regressors_[c].predict(feats)
            refined = clip_boxes(
                apply_bbox_deltas(roi_boxes, deltas), image.width, image.height
            )
            valid = (
                (scores >= self.score_threshold)
                & (refined[:, 2] > refined[:, 0])
                & (refined[:, 3] > refined[:, 1])
            )
            idx = np.flatnonzero(valid)
            if idx.size == 0:
                continue
            keep = nms(refined[idx], scores[idx], self.nms_iou)
            for k in idx[keep]:
                results.append(
                    DetectionResult(
                        image_id=image.id,
                        class_id=c,
                        box=refined[k].copy(),
                        score=float(scores[k]),
                        roi_index=int(k),
                    )
                )
        results.sort(key=lambda r: -r.score)
        return results
