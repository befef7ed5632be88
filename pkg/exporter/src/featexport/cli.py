"""Command-line entry point for the feature exporter."""

from __future__ import annotations

import argparse
import sys

from .export import ExportJob, export


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="featexport",
        description="Export detection-head and mask-head features from a "
        "pre-trained region-based segmentation network into a feature store",
    )
    parser.add_argument("--annotations", required=True, help="annotations JSON file")
    parser.add_argument("--images-dir", required=True, help="directory with image files")
    parser.add_argument("--out", required=True, help="output feature-store directory")
    parser.add_argument(
        "--checkpoint",
        default="random",
        help="path to a Mask R-CNN state dict, or 'random' for a seeded "
        "fresh initialization (default)",
    )
    parser.add_argument("--num-classes", type=int, default=91,
                        help="class count of the checkpoint's heads")
    parser.add_argument("--proposals", type=int, default=300,
                        help="RPN proposals kept per image (post-NMS)")
    parser.add_argument("--min-size", type=int, default=800)
    parser.add_argument("--max-size", type=int, default=1333)
    parser.add_argument("--iou-fg", type=float, default=0.5)
    parser.add_argument("--iou-bg", type=float, default=0.3)
    parser.add_argument("--seed", type=int, default=0)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    job = ExportJob(
        annotations=args.annotations,
        images_dir=args.images_dir,
        out_dir=args.out,
        checkpoint=args.checkpoint,
        num_classes=args.num_classes,
        proposals_per_image=args.proposals,
        min_size=args.min_size,
        max_size=args.max_size,
        iou_fg=args.iou_fg,
        iou_bg=args.iou_bg,
        seed=args.seed,
    )
    try:
        out = export(job)
    except (RuntimeError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    dims = job.report["dims"]
    print(f"exported to {out}")
    print(f"  dims: d={dims['d']} s={dims['s']} f={dims['f']}")
    print(f"  total: {job.report['total_seconds']:.1f}s over "
          f"{len(job.report['per_image_seconds'])} images")
    return 0


if __name__ == "__main__":
    sys.exit(main())
