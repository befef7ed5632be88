"""Run configuration: one JSON document fully determines a run."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .detection import MinibootstrapConfig
from .exceptions import ConfigError


@dataclass
class DetectionParams:
    sigma: float = 4.0
    lam: float = 1e-5
    n_centers: int = 200
    max_iter: int = 20
    tol: float = 1e-10
    rls_lam: float = 1e-3
    score_threshold: float = 0.0
    nms_iou: float = 0.3
    minibootstrap: MinibootstrapConfig = field(default_factory=MinibootstrapConfig)


@dataclass
class SegmentationParams:
    sigma: float = 4.0
    lam: float = 1e-5
    n_centers: int = 300
    max_iter: int = 20
    tol: float = 1e-10
    sampling_factor: float = 0.3
    mask_threshold: float = 0.0


@dataclass
class GridSearchSpec:
    detection_sigma: list[float] = field(default_factory=list)
    detection_lam: list[float] = field(default_factory=list)
    segmentation_sigma: list[float] = field(default_factory=list)
    segmentation_lam: list[float] = field(default_factory=list)


@dataclass
class RunConfig:
    dataset: str = ""
    output_dir: str = "out"
    seed: int = 0
    detection: DetectionParams = field(default_factory=DetectionParams)
    segmentation: SegmentationParams = field(default_factory=SegmentationParams)
    eval_thresholds: list[float] = field(default_factory=lambda: [0.5, 0.7])
    grid_search: GridSearchSpec | None = None

    def validate(self, *, require_dataset: bool = True) -> None:
        if require_dataset:
            if not self.dataset:
                raise ConfigError("config: dataset path is required")
            if not Path(self.dataset).is_dir():
                raise ConfigError(f"config: dataset path {self.dataset!r} does not exist")
        for thr in self.eval_thresholds:
            if not (0.0 < thr <= 1.0):
                raise ConfigError(f"config: eval threshold {thr} out of (0, 1]")
        for name, value in (
            ("detection.sigma", self.detection.sigma),
            ("detection.lam", self.detection.lam),
            ("segmentation.sigma", self.segmentation.sigma),
            ("segmentation.lam", self.segmentation.lam),
        ):
            if value <= 0:
                raise ConfigError(f"config: {name} must be positive, got {value}")
        if not (0.0 < self.segmentation.sampling_factor <= 1.0):
            raise ConfigError(
                f"config: sampling_factor must be in (0, 1], got "
                f"{self.segmentation.sampling_factor}"
            )

    def to_dict(self) -> dict:
        doc = asdict(self)
        if self.grid_search is None:
            doc.pop("grid_search")
        return doc

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1, sort_keys=True)
            fh.write("\n")

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        doc = dict(doc)

        def build(block_cls, block: dict, where: str):
            known = {f.name for f in block_cls.__dataclass_fields__.values()}
            unknown = set(block) - known
            if unknown:
                raise ConfigError(f"config: unknown keys in {where}: {sorted(unknown)}")
            try:
                return block_cls(**block)
            except (TypeError, ConfigError) as exc:
                raise ConfigError(f"config: bad {where} block: {exc}") from exc

        detection_doc = dict(doc.pop("detection", {}))
        boot = build(
            MinibootstrapConfig,
            dict(detection_doc.pop("minibootstrap", {})),
            "detection.minibootstrap",
        )
        detection = build(DetectionParams, detection_doc, "detection")
        detection.minibootstrap = boot
        segmentation = build(
            SegmentationParams, dict(doc.pop("segmentation", {})), "segmentation"
        )
        grid_doc = doc.pop("grid_search", None)
        grid = build(GridSearchSpec, dict(grid_doc), "grid_search") if grid_doc else None
        known = {"dataset", "output_dir", "seed", "eval_thresholds"}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"config: unknown top-level keys: {sorted(unknown)}")
        cfg = cls(
            dataset=str(doc.get("dataset", "")),
            output_dir=str(doc.get("output_dir", "out")),
            seed=int(doc.get("seed", 0)),
            detection=detection,
            segmentation=segmentation,
            eval_thresholds=[float(t) for t in doc.get("eval_thresholds", [0.5, 0.7])],
            grid_search=grid,
        )
        return cfg

    @classmethod
    def from_json(cls, path) -> "RunConfig":
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            with open(path) as fh:
                doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        return cls.from_dict(doc)
