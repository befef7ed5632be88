"""Command-line front end.

Subcommands: gen-synthetic, validate-dataset, train, predict, eval,
sweep-r, gt-mask-eval. All run-level commands are driven by a JSON config
file; --seed and --out override the config. Exit code is 0 only on full
success.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import pipeline
from .config import RunConfig
from .exceptions import KernsegError
from .store import SyntheticConfig, generate_synthetic, load_dataset, validate_dataset


def _load_config(args) -> RunConfig:
    config = RunConfig.from_json(args.config)
    if getattr(args, "seed", None) is not None:
        config.seed = args.seed
    if getattr(args, "out", None) is not None:
        config.output_dir = args.out
    return config


def _cmd_gen_synthetic(args) -> int:
    doc = {}
    if args.config:
        with open(args.config) as fh:
            doc = json.load(fh)
    if args.seed is not None:
        doc["seed"] = args.seed
    cfg = SyntheticConfig.from_dict(doc)
    index = generate_synthetic(cfg, args.out)
    counts = validate_dataset(args.out)
    print(f"wrote synthetic dataset to {args.out}")
    for split, info in counts.items():
        print(
            f"  {split}: {info['rois']} rois, {info['grids']} grids, "
            f"{info['annotations']} annotations"
        )
    print(f"  classes: {index.num_classes}, dims d={index.d} s={index.s} f={index.f}")
    return 0


def _cmd_validate_dataset(args) -> int:
    counts = validate_dataset(args.dataset)
    print(f"dataset {args.dataset} is valid")
    for split, info in counts.items():
        print(
            f"  {split}: {info['rois']} rois, {info['grids']} grids, "
            f"{info['annotations']} annotations"
        )
    return 0


def _cmd_train(args) -> int:
    config = _load_config(args)
    config.validate()
    out_dir = Path(config.output_dir)
    with pipeline.output_lock(out_dir):
        if args.grid_search:
            chosen = pipeline.grid_search_params(config)
            print("grid search picked:", json.dumps(chosen, sort_keys=True))
        artifacts = pipeline.train_banks(config)
    timing = artifacts.timing
    print(f"banks written to {out_dir}")
    print(
        "timing: load {feature_load_s:.2f}s, detection {detection_train_s:.2f}s, "
        "segmentation {segmentation_train_s:.2f}s, total {total_s:.2f}s".format(**timing)
    )
    return 0


def _cmd_predict(args) -> int:
    config = _load_config(args)
    config.validate()
    banks = Path(args.banks) if args.banks else Path(config.output_dir)
    detector = pipeline.load_detector(banks / pipeline.DETECTION_BANK_DIR)
    segmenter = pipeline.load_segmenter(banks / pipeline.MASK_BANK_DIR)
    index = load_dataset(config.dataset)
    out_dir = Path(config.output_dir)
    with pipeline.output_lock(out_dir):
        detections, mask_rows = pipeline.predict_split(
            detector, segmenter, config.dataset, index, args.split
        )
        pipeline.write_jsonl(out_dir / f"detections_{args.split}.jsonl", detections)
        pipeline.write_jsonl(out_dir / f"masks_{args.split}.jsonl", mask_rows)
    print(
        f"wrote {len(detections)} detections and {len(mask_rows)} masks "
        f"for split {args.split} to {out_dir}"
    )
    return 0


def _cmd_eval(args) -> int:
    config = _load_config(args)
    config.validate()
    index = load_dataset(config.dataset)
    pred_dir = Path(args.predictions) if args.predictions else Path(config.output_dir)
    detections = pipeline.read_jsonl(pred_dir / f"detections_{args.split}.jsonl")
    masks_path = pred_dir / f"masks_{args.split}.jsonl"
    mask_rows = pipeline.read_jsonl(masks_path) if masks_path.is_file() else []
    bbox_report, segm_report = pipeline.evaluate_dumps(
        detections, mask_rows, config.dataset, index, args.split, config.eval_thresholds
    )
    report = {
        "bbox": bbox_report.to_dict(),
        "segm": segm_report.to_dict() if segm_report else None,
    }
    out_dir = Path(config.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / f"eval_{args.split}.json", "w") as fh:
        json.dump(report, fh, indent=1, sort_keys=True)
    merged = bbox_report
    if segm_report is not None:
        merged.map_segm = segm_report.map_segm
        merged.segm = segm_report.segm
    print(merged.to_table(label="ours"))
    return 0


def _cmd_sweep_r(args) -> int:
    config = _load_config(args)
    config.validate()
    r_values = [float(v) for v in args.r_values.split(",")]
    out_dir = Path(config.output_dir)
    with pipeline.output_lock(out_dir):
        rows = pipeline.sweep_sampling_factor(
            config, r_values, repeats=args.repeats, split=args.split
        )
        csv_text = pipeline.sweep_rows_to_csv(rows, config.eval_thresholds)
        (out_dir / "sweep_r.csv").write_text(csv_text)
        with open(out_dir / "sweep_r_details.json", "w") as fh:
            json.dump(rows, fh, indent=1, sort_keys=True)
    print(csv_text, end="")
    return 0


def _cmd_gt_mask_eval(args) -> int:
    config = _load_config(args)
    config.validate()
    index = load_dataset(config.dataset)
    banks = Path(args.banks) if args.banks else Path(config.output_dir)
    mask_bank = banks / pipeline.MASK_BANK_DIR
    if mask_bank.is_dir():
        segmenter = pipeline.load_segmenter(mask_bank)
    else:
        artifacts = pipeline.train_banks(config, write=False)
        segmenter = artifacts.segmenter
    report = pipeline.gt_mask_eval(
        segmenter, config.dataset, index, args.split, config.eval_thresholds
    )
    out_dir = Path(config.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / f"gt_mask_eval_{args.split}.json", "w") as fh:
        json.dump(report.to_dict(), fh, indent=1, sort_keys=True)
    for thr in config.eval_thresholds:
        print(f"gt-box segm mAP{int(round(thr * 100))}: {report.map_segm[thr]:.4f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="kernseg",
        description="Online kernel-based instance detection and segmentation "
        "from precomputed region features",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synthetic", help="generate a seeded synthetic feature store")
    p.add_argument("--config", help="JSON file with synthetic generator settings")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=_cmd_gen_synthetic)

    p = sub.add_parser("validate-dataset", help="full validation pass over a feature store")
    p.add_argument("dataset")
    p.set_defaults(func=_cmd_validate_dataset)

    p = sub.add_parser("train", help="train detection and segmentation banks")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--grid-search", action="store_true",
                   help="pick sigma/lambda on the validation split first")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("predict", help="dump detections and masks for a split")
    p.add_argument("--config", required=True)
    p.add_argument("--banks", default=None, help="bank directory (default: output dir)")
    p.add_argument("--split", default="test")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_predict)

    p = sub.add_parser("eval", help="evaluate prediction dumps against ground truth")
    p.add_argument("--config", required=True)
    p.add_argument("--predictions", default=None, help="directory with jsonl dumps")
    p.add_argument("--split", default="test")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("sweep-r", help="sweep the pixel sampling factor")
    p.add_argument("--config", required=True)
    p.add_argument("--r-values", default="1.0,0.7,0.5,0.3,0.1,0.05,0.01")
    p.add_argument("--repeats", type=int, default=1)
    p.add_argument("--split", default="test")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_sweep_r)

    p = sub.add_parser("gt-mask-eval", help="segment ground-truth boxes and evaluate")
    p.add_argument("--config", required=True)
    p.add_argument("--banks", default=None)
    p.add_argument("--split", default="test")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_gt_mask_eval)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except KernsegError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
