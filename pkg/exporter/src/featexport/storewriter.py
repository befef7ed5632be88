"""Stand-alone writer for the feature-store binary format.

This is a second, independent implementation of the documented byte
layout (little-endian record files with magic, count, and length-prefixed
records); the store consumer's validator is the compatibility check.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

ROI_MAGIC = b"ROI1"
GRID_MAGIC = b"GRD1"
MASK_MAGIC = b"MSK1"
FORMAT_VERSION = 1

_FILE_HEADER = struct.Struct("<4sIQII")
_LEN_PREFIX = struct.Struct("<I")

SOURCE_RPN = 0
SOURCE_GT = 1


def _pack_rle(rle: dict) -> bytes:
    counts = np.asarray(rle["counts"], dtype="<u4")
    return struct.pack("<III", rle["h"], rle["w"], counts.size) + counts.tobytes()


class RecordFile:
    def __init__(self, path: Path, magic: bytes, dims: tuple[int, int]):
        self._fh = open(path, "wb")
        self._magic = magic
        self._dims = dims
        self.count = 0
        self._fh.write(_FILE_HEADER.pack(magic, FORMAT_VERSION, 0, *dims))

    def write(self, payload: bytes) -> None:
        self._fh.write(_LEN_PREFIX.pack(len(payload)))
        self._fh.write(payload)
        self.count += 1

    def close(self) -> None:
        self._fh.seek(0)
        self._fh.write(_FILE_HEADER.pack(self._magic, FORMAT_VERSION, self.count, *self._dims))
        self._fh.close()


class StoreWriter:
    """Writes manifest.json plus per-split roi/grid/mask record files."""

    def __init__(self, out_dir, class_names, images, d: int, s: int, f: int, splits):
        self.root = Path(out_dir)
        self.root.mkdir(parents=True, exist_ok=True)
        self.class_names = list(class_names)
        self.images = images  # list of dicts: id, width, height, split
        self.dims = (d, s, f)
        self.splits = list(splits)
        self._files = {}
        for split in self.splits:
            self._files[split] = {
                "roi": RecordFile(self.root / f"rois_{split}.bin", ROI_MAGIC, (d, 0)),
                "grid": RecordFile(self.root / f"grids_{split}.bin", GRID_MAGIC, (s, f)),
                "mask": RecordFile(self.root / f"masks_{split}.bin", MASK_MAGIC, (0, 0)),
            }

    def add_roi(self, split, image_id, box, feature, source, label, iou) -> None:
        head = struct.pack(
            "<I4fBif", image_id, *(float(v) for v in box), source, int(label), float(iou)
        )
        self._files[split]["roi"].write(
            head + np.asarray(feature, dtype="<f4").tobytes()
        )

    def add_gt_grid(self, split, image_id, box, class_id, grid, mask_grid, mask_rle) -> None:
        head = struct.pack("<I4fIi", image_id, *(float(v) for v in box), class_id, -1)
        bits = np.packbits(np.asarray(mask_grid, dtype=bool).reshape(-1))
        self._files[split]["grid"].write(
            head
            + np.asarray(grid, dtype="<f4").tobytes()
            + bits.tobytes()
            + _pack_rle(mask_rle)
        )

    def add_roi_grid(self, split, image_id, box, roi_index, grid) -> None:
        head = struct.pack("<I4fIi", image_id, *(float(v) for v in box), 0, roi_index)
        self._files[split]["grid"].write(head + np.asarray(grid, dtype="<f4").tobytes())

    def add_annotation(self, split, image_id, class_id, box, mask_rle) -> None:
        head = struct.pack("<II4f", image_id, class_id, *(float(v) for v in box))
        self._files[split]["mask"].write(head + _pack_rle(mask_rle))

    def close(self) -> None:
        for table in self._files.values():
            for rec in table.values():
                rec.close()
        d, s, f = self.dims
        manifest = {
            "format_version": FORMAT_VERSION,
            "num_classes": len(self.class_names),
            "class_names": self.class_names,
            "feature_dims": {"d": d, "s": s, "f": f},
            "splits": self.splits,
            "grid_convention": "per_roi",
            "images": self.images,
        }
        with open(self.root / "manifest.json", "w") as fh:
            json.dump(manifest, fh, indent=1, sort_keys=True)
            fh.write("\n")
