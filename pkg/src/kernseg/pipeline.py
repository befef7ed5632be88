"""End-to-end orchestration: train banks, dump predictions, evaluate,
sweep the pixel sampling factor, and grid-search kernel parameters.

Detection and segmentation are trained sequentially; the timing report
separates feature loading, detection training, segmentation training,
and serialization so their sum accounts for the command's wall time.
"""

from __future__ import annotations

import json
import os
import statistics
import time
import warnings
from contextlib import contextmanager
from dataclasses import dataclass
from itertools import product
from pathlib import Path

import numpy as np

from .config import RunConfig
from .detection import DetectionResult, OnlineDetector
from .evaluation import EvalReport, evaluate
from .exceptions import ConfigError, DatasetError
from .falkon import FalkonClassifier
from .ridge import RidgeBoxRegressor
from .rle import rle_encode
from .segmentation import OnlineSegmenter
from .store import load_dataset, stream_annotations, stream_grids, stream_rois
from .store.schema import DatasetIndex

DETECTION_BANK_DIR = "detection_bank"
MASK_BANK_DIR = "mask_bank"


@contextmanager
def output_lock(out_dir: Path):
    """One run owns the output directory; concurrent runs fail fast."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lock = out_dir / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise ConfigError(f"output directory {out_dir} is locked by another run")
    try:
        yield
    finally:
        os.close(fd)
        lock.unlink(missing_ok=True)


# -- bank serialization ----------------------------------------------------


def save_detector(detector: OnlineDetector, path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    classes = {}
    for c in range(1, detector.num_classes + 1):
        model = detector.classifiers_.get(c)
        if model is None:
            classes[str(c)] = None
            continue
        model.save(path / f"falkon_{c}.fkn")
        reg = detector.regressors_[c]
        np.savez(path / f"rls_{c}.npz", weights=reg.weights_, lam=reg.lam)
        classes[str(c)] = {"classifier": f"falkon_{c}.fkn", "regressor": f"rls_{c}.npz"}
    stats = {
        str(c): {
            "negatives_visited": s.negatives_visited,
            "negatives_kept": s.negatives_kept,
            "rounds": s.rounds,
            "train_seconds": s.train_seconds,
        }
        for c, s in detector.training_stats_.items()
    }
    doc = {
        "type": "detection",
        "num_classes": detector.num_classes,
        "score_threshold": detector.score_threshold,
        "nms_iou": detector.nms_iou,
        "classes": classes,
        "training_stats": stats,
    }
    with open(path / "bank.json", "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)


def load_detector(path) -> OnlineDetector:
    path = Path(path)
    with open(path / "bank.json") as fh:
        doc = json.load(fh)
    if doc.get("type") != "detection":
        raise DatasetError(f"{path}: not a detection bank")
    detector = OnlineDetector(
        num_classes=int(doc["num_classes"]),
        score_threshold=float(doc["score_threshold"]),
        nms_iou=float(doc["nms_iou"]),
    )
    detector.classifiers_ = {}
    detector.regressors_ = {}
    detector.training_stats_ = {}
    for c in range(1, detector.num_classes + 1):
        entry = doc["classes"].get(str(c))
        if entry is None:
            detector.classifiers_[c] = None
            detector.regressors_[c] = None
            continue
        detector.classifiers_[c] = FalkonClassifier.load(path / entry["classifier"])
        blob = np.load(path / entry["regressor"])
        reg = RidgeBoxRegressor(lam=float(blob["lam"]))
        reg.weights_ = blob["weights"]
        reg.n_features_in_ = reg.weights_.shape[0] - 1
        detector.regressors_[c] = reg
    return detector


def save_segmenter(segmenter: OnlineSegmenter, path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    classes = {}
    for c in range(1, segmenter.num_classes + 1):
        model = segmenter.models_.get(c)
        if model is None:
            classes[str(c)] = None
            continue
        model.save(path / f"falkon_{c}.fkn")
        classes[str(c)] = f"falkon_{c}.fkn"
    doc = {
        "type": "mask",
        "num_classes": segmenter.num_classes,
        "mask_threshold": segmenter.mask_threshold,
        "grid_side": segmenter.grid_side_,
        "classes": classes,
        "sample_counts": {
            str(c): vars(counts) for c, counts in segmenter.sample_counts_.items()
        },
        "train_seconds": {str(c): t for c, t in segmenter.train_seconds_.items()},
    }
    with open(path / "bank.json", "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)


def load_segmenter(path) -> OnlineSegmenter:
    path = Path(path)
    with open(path / "bank.json") as fh:
        doc = json.load(fh)
    if doc.get("type") != "mask":
        raise DatasetError(f"{path}: not a mask bank")
    segmenter = OnlineSegmenter(
        num_classes=int(doc["num_classes"]),
        mask_threshold=float(doc["mask_threshold"]),
    )
    segmenter.grid_side_ = doc.get("grid_side")
    segmenter.models_ = {}
    segmenter.sample_counts_ = {}
    segmenter.train_seconds_ = {}
    for c in range(1, segmenter.num_classes + 1):
        entry = doc["classes"].get(str(c))
        segmenter.models_[c] = (
            FalkonClassifier.load(path / entry) if entry is not None else None
        )
    return segmenter


# -- data loading ----------------------------------------------------------


def load_detection_data(store: str, index: DatasetIndex, split: str):
    """RoIs and annotations grouped by image, in stream order."""
    rois_by_image = {img.id: [] for img in index.images_in(split)}
    for roi in stream_rois(store, index, split):
        rois_by_image[roi.image_id].append(roi)
    anns_by_image = {img.id: [] for img in index.images_in(split)}
    for ann in stream_annotations(store, index, split):
        anns_by_image[ann.image_id].append(ann)
    return rois_by_image, anns_by_image


def collect_pixel_pools(store: str, index: DatasetIndex, split: str = "train"):
    """Pooled per-class pixel features from ground-truth grids."""
    from .segmentation import extract_pixel_samples

    pos_pool = {c: [] for c in range(1, index.num_classes + 1)}
    neg_pool = {c: [] for c in range(1, index.num_classes + 1)}
    for grid in stream_grids(store, index, split):
        if grid.class_id == 0:
            continue
        pos, neg = extract_pixel_samples(grid)
        pos_pool[grid.class_id].append(pos)
        neg_pool[grid.class_id].append(neg)
    join = lambda pool: {
        c: (np.vstack(rows) if rows else np.zeros((0, index.f), dtype=np.float32))
        for c, rows in pool.items()
    }
    return join(pos_pool), join(neg_pool)


# -- training --------------------------------------------------------------


@dataclass
class TrainArtifacts:
    detector: OnlineDetector
    segmenter: OnlineSegmenter
    timing: dict
    out_dir: Path | None = None


def build_detector(config: RunConfig, index: DatasetIndex) -> OnlineDetector:
    det = config.detection
    return OnlineDetector(
        num_classes=index.num_classes,
        sigma=det.sigma,
        lam=det.lam,
        n_centers=det.n_centers,
        max_iter=det.max_iter,
        tol=det.tol,
        rls_lam=det.rls_lam,
        bootstrap=det.minibootstrap,
        score_threshold=det.score_threshold,
        nms_iou=det.nms_iou,
        seed=config.seed,
    )


def build_segmenter(config: RunConfig, index: DatasetIndex) -> OnlineSegmenter:
    seg = config.segmentation
    return OnlineSegmenter(
        num_classes=index.num_classes,
        sigma=seg.sigma,
        lam=seg.lam,
        n_centers=seg.n_centers,
        max_iter=seg.max_iter,
        tol=seg.tol,
        sampling_factor=seg.sampling_factor,
        mask_threshold=seg.mask_threshold,
        seed=config.seed,
    )


def train_banks(config: RunConfig, *, write: bool = True) -> TrainArtifacts:
    """Train detection then segmentation, with a phase-timing breakdown."""
    config.validate()
    t_start = time.perf_counter()

    t0 = time.perf_counter()
    index = load_dataset(config.dataset)
    rois_by_image, anns_by_image = load_detection_data(config.dataset, index, "train")
    grids = [
        g for g in stream_grids(config.dataset, index, "train") if g.class_id != 0
    ]
    feature_load_s = time.perf_counter() - t0

    t0 = time.perf_counter()
    detector = build_detector(config, index).fit(rois_by_image, anns_by_image)
    detection_train_s = time.perf_counter() - t0

    t0 = time.perf_counter()
    segmenter = build_segmenter(config, index).fit(grids)
    segmentation_train_s = time.perf_counter() - t0

    out_dir = None
    t0 = time.perf_counter()
    if write:
        out_dir = Path(config.output_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        save_detector(detector, out_dir / DETECTION_BANK_DIR)
        save_segmenter(segmenter, out_dir / MASK_BANK_DIR)
        config.save(out_dir / "config.json")
    serialize_s = time.perf_counter() - t0

    timing = {
        "feature_load_s": feature_load_s,
        "detection_train_s": detection_train_s,
        "segmentation_train_s": segmentation_train_s,
        "serialize_s": serialize_s,
        "total_s": time.perf_counter() - t_start,
    }
    if write:
        with open(out_dir / "timing.json", "w") as fh:
            json.dump(timing, fh, indent=1, sort_keys=True)
    return TrainArtifacts(detector=detector, segmenter=segmenter, timing=timing, out_dir=out_dir)


# -- prediction ------------------------------------------------------------


def detection_row(det: DetectionResult) -> dict:
    return {
        "image_id": det.image_id,
        "class_id": det.class_id,
        "box": [float(v) for v in det.box],
        "score": det.score,
        "roi_index": det.roi_index,
    }


def predict_split(
    detector: OnlineDetector,
    segmenter: OnlineSegmenter | None,
    store: str,
    index: DatasetIndex,
    split: str,
) -> tuple[list[dict], list[dict]]:
    """Detections plus, when grids and a segmenter are available, masks.

    Masks are predicted from the grid linked to each detection's source
    RoI, resampled into the refined detection box.
    """
    detections: list[dict] = []
    by_roi: dict[tuple[int, int], list[DetectionResult]] = {}
    rois_by_image = {img.id: [] for img in index.images_in(split)}
    for roi in stream_rois(store, index, split):
        rois_by_image[roi.image_id].append(roi)
    for image in index.images_in(split):
        for det in detector.predict(rois_by_image[image.id], image):
            detections.append(detection_row(det))
            by_roi.setdefault((det.image_id, det.roi_index), []).append(det)

    mask_rows: list[dict] = []
    if segmenter is not None:
        sizes = {img.id: (img.width, img.height) for img in index.images}
        for grid in stream_grids(store, index, split):
            if grid.class_id != 0:
                continue
            for det in by_roi.get((grid.image_id, grid.roi_index), []):
                if segmenter.models_.get(det.class_id) is None:
                    warnings.warn(
                        f"class {det.class_id}: no mask model, detection left unmasked"
                    )
                    continue
                width, height = sizes[grid.image_id]
                mask = segmenter.predict_mask(
                    grid.grid, det.class_id, det.box, width, height
                )
                row = detection_row(det)
                row["mask"] = rle_encode(mask)
                mask_rows.append(row)
    return detections, mask_rows


def gather_ground_truth(store: str, index: DatasetIndex, split: str) -> list[dict]:
    return [
        {
            "image_id": ann.image_id,
            "class_id": ann.class_id,
            "box": [float(v) for v in ann.box],
            "mask": ann.mask,
        }
        for ann in stream_annotations(store, index, split)
    ]


def write_jsonl(path, rows: list[dict]) -> None:
    with open(path, "w") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True))
            fh.write("\n")


def read_jsonl(path) -> list[dict]:
    rows = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                rows.append(json.loads(line))
    return rows


def evaluate_dumps(
    detections: list[dict],
    mask_rows: list[dict],
    store: str,
    index: DatasetIndex,
    split: str,
    thresholds,
) -> tuple[EvalReport, EvalReport | None]:
    """Box report over all detections; mask report when masks exist."""
    gts = gather_ground_truth(store, index, split)
    bbox_report = evaluate(detections, gts, thresholds=thresholds, with_masks=False)
    segm_report = None
    if mask_rows:
        segm_report = evaluate(mask_rows, gts, thresholds=thresholds, with_masks=True)
    return bbox_report, segm_report


def gt_mask_eval(
    segmenter: OnlineSegmenter, store: str, index: DatasetIndex, split: str, thresholds
) -> EvalReport:
    """Decoupled mode: segment ground-truth boxes and evaluate the masks."""
    sizes = {img.id: (img.width, img.height) for img in index.images}
    grids = (g for g in stream_grids(store, index, split) if g.class_id != 0)
    results = segmenter.segment_gt_boxes(grids, sizes)
    rows = []
    for res in results:
        row = detection_row(res.detection)
        row["mask"] = rle_encode(res.mask)
        rows.append(row)
    gts = gather_ground_truth(store, index, split)
    return evaluate(rows, gts, thresholds=thresholds, with_masks=True)


# -- sampling-factor sweep ---------------------------------------------------


def sweep_sampling_factor(
    config: RunConfig,
    r_values,
    repeats: int = 1,
    split: str = "test",
    detector: OnlineDetector | None = None,
) -> list[dict]:
    """Retrain segmentation at each sampling factor, reusing one detector.

    Each row reports exact kept counts per class and polarity, the median
    segmentation train time over ``repeats`` runs, and segm mAP at the
    configured thresholds.
    """
    config.validate()
    index = load_dataset(config.dataset)
    if detector is None:
        rois_by_image, anns_by_image = load_detection_data(config.dataset, index, "train")
        detector = build_detector(config, index).fit(rois_by_image, anns_by_image)

    pos_pool, neg_pool = collect_pixel_pools(config.dataset, index, "train")
    thresholds = config.eval_thresholds

    rows = []
    for r in r_values:
        seg = None
        times = []
        for _ in range(max(int(repeats), 1)):
            seg = build_segmenter(config, index)
            seg.sampling_factor = float(r)
            seg.fit_pools(pos_pool, neg_pool)
            times.append(sum(seg.train_seconds_.values()))
        detections, mask_rows = predict_split(detector, seg, config.dataset, index, split)
        _bbox, segm_report = evaluate_dumps(
            detections, mask_rows, config.dataset, index, split, thresholds
        )
        kept = {
            c: {
                "pre_positive": counts.pre_positive,
                "pre_negative": counts.pre_negative,
                "kept_positive": counts.kept_positive,
                "kept_negative": counts.kept_negative,
            }
            for c, counts in seg.sample_counts_.items()
        }
        row = {
            "r": float(r),
            "kept_positive_total": sum(v["kept_positive"] for v in kept.values()),
            "kept_negative_total": sum(v["kept_negative"] for v in kept.values()),
            "train_seconds_median": statistics.median(times),
            "per_class_counts": kept,
        }
        for thr in thresholds:
            pct = int(round(thr * 100))
            row[f"map{pct}_segm"] = (
                segm_report.map_segm[thr] if segm_report is not None else 0.0
            )
        rows.append(row)
    return rows


def sweep_rows_to_csv(rows: list[dict], thresholds) -> str:
    cols = ["r", "kept_positive_total", "kept_negative_total", "train_seconds_median"]
    cols += [f"map{int(round(t * 100))}_segm" for t in thresholds]
    lines = [",".join(cols)]
    for row in rows:
        lines.append(",".join(f"{row[c]:g}" if isinstance(row[c], float) else str(row[c]) for c in cols))
    return "\n".join(lines) + "\n"


# -- grid search -------------------------------------------------------------


def grid_search_params(config: RunConfig, split: str = "val") -> dict:
    """Pick kernel width and regularization on the validation split.

    Detection parameters are chosen by bbox mAP at the lowest configured
    threshold; segmentation parameters by segm mAP with the chosen
    detector. The config is updated in place and the choices returned.
    """
    search = config.grid_search
    if search is None:
        raise ConfigError("config has no grid_search block")
    config.validate()
    index = load_dataset(config.dataset)
    rois_by_image, anns_by_image = load_detection_data(config.dataset, index, "train")
    thr = min(config.eval_thresholds)

    det_grid = list(
        product(
            search.detection_sigma or [config.detection.sigma],
            search.detection_lam or [config.detection.lam],
        )
    )
    best_det = None
    best_detector = None
    for sigma, lam in det_grid:
        config.detection.sigma = float(sigma)
        config.detection.lam = float(lam)
        detector = build_detector(config, index).fit(rois_by_image, anns_by_image)
        detections, _ = predict_split(detector, None, config.dataset, index, split)
        bbox_report, _ = evaluate_dumps(
            detections, [], config.dataset, index, split, [thr]
        )
        score = bbox_report.map_bbox[thr]
        if best_det is None or score > best_det[0]:
            best_det = (score, sigma, lam)
            best_detector = detector
    config.detection.sigma = float(best_det[1])
    config.detection.lam = float(best_det[2])

    pos_pool, neg_pool = collect_pixel_pools(config.dataset, index, "train")
    seg_grid = list(
        product(
            search.segmentation_sigma or [config.segmentation.sigma],
            search.segmentation_lam or [config.segmentation.lam],
        )
    )
    best_seg = None
    for sigma, lam in seg_grid:
        config.segmentation.sigma = float(sigma)
        config.segmentation.lam = float(lam)
        seg = build_segmenter(config, index)
        seg.fit_pools(pos_pool, neg_pool)
        detections, mask_rows = predict_split(
            best_detector, seg, config.dataset, index, split
        )
        _, segm_report = evaluate_dumps(
            detections, mask_rows, config.dataset, index, split, [thr]
        )
        score = segm_report.map_segm[thr] if segm_report is not None else 0.0
        if best_seg is None or score > best_seg[0]:
            best_seg = (score, sigma, lam)
    config.segmentation.sigma = float(best_seg[1])
    config.segmentation.lam = float(best_seg[2])

    return {
        "detection": {"sigma": config.detection.sigma, "lam": config.detection.lam,
                      "val_map_bbox": best_det[0]},
        "segmentation": {"sigma": config.segmentation.sigma, "lam": config.segmentation.lam,
                         "val_map_segm": best_seg[0]},
    }
