"""Binary readers and writers for the on-disk feature store.

Directory layout: ``manifest.json`` plus, per split, ``rois_<split>.bin``
(detection features), ``grids_<split>.bin`` (mask-head feature maps) and
``masks_<split>.bin`` (ground-truth instance annotations). All binary
files are little-endian, carry a 4-byte magic and a record count, and
length-prefix every record; see docs/format.md for the exact byte layout.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Iterator

import numpy as np

from ..exceptions import DatasetError
from . import schema
from .schema import (
    DatasetIndex,
    ImageRecord,
    InstanceAnnotation,
    RoIFeature,
    SegFeatureGrid,
    SOURCE_GROUND_TRUTH,
    SOURCE_RPN_PROPOSAL,
)

MANIFEST_NAME = "manifest.json"
FORMAT_VERSION = 1

ROI_MAGIC = b"ROI1"
GRID_MAGIC = b"GRD1"
MASK_MAGIC = b"MSK1"

# magic, version, record count, then two u32 dims (d, 0) or (s, f) or (0, 0)
_FILE_HEADER = struct.Struct("<4sIQII")
_LEN_PREFIX = struct.Struct("<I")

_SOURCE_CODES = {SOURCE_RPN_PROPOSAL: 0, SOURCE_GROUND_TRUTH: 1}
_SOURCE_NAMES = {v: k for k, v in _SOURCE_CODES.items()}


def roi_file(root: Path, split: str) -> Path:
    return Path(root) / f"rois_{split}.bin"


def grid_file(root: Path, split: str) -> Path:
    return Path(root) / f"grids_{split}.bin"


def mask_file(root: Path, split: str) -> Path:
    return Path(root) / f"masks_{split}.bin"


# -- manifest ------------------------------------------------------------


def save_manifest(root: Path, index: DatasetIndex) -> None:
    index.validate()
    doc = {
        "format_version": index.format_version,
        "num_classes": index.num_classes,
        "class_names": index.class_names,
        "feature_dims": {"d": index.d, "s": index.s, "f": index.f},
        "splits": index.splits,
        "grid_convention": index.grid_convention,
        "images": [
            {"id": img.id, "width": img.width, "height": img.height, "split": img.split}
            for img in index.images
        ],
    }
    with open(Path(root) / MANIFEST_NAME, "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_dataset(path) -> DatasetIndex:
    """Load and validate the manifest of a feature store directory."""
    root = Path(path)
    manifest = root / MANIFEST_NAME
    if not manifest.is_file():
        raise DatasetError(f"missing manifest: {manifest}")
    try:
        with open(manifest) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{manifest}: invalid JSON ({exc})") from exc
    try:
        version = int(doc["format_version"])
        if version != FORMAT_VERSION:
            raise DatasetError(
                f"{manifest}: format_version {version} unsupported "
                f"(expected {FORMAT_VERSION})"
            )
        dims = doc["feature_dims"]
        index = DatasetIndex(
            num_classes=int(doc["num_classes"]),
            class_names=list(doc["class_names"]),
            images=[
                ImageRecord(
                    id=int(e["id"]),
                    width=int(e["width"]),
                    height=int(e["height"]),
                    split=str(e["split"]),
                )
                for e in doc["images"]
            ],
            d=int(dims["d"]),
            s=int(dims["s"]),
            f=int(dims["f"]),
            splits=list(doc["splits"]),
            format_version=version,
            grid_convention=str(doc.get("grid_convention", "per_roi")),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise DatasetError(f"{manifest}: malformed manifest ({exc})") from exc
    index.validate()
    return index


# -- record encoding -----------------------------------------------------


def _encode_rle(rle: dict) -> bytes:
    counts = np.asarray(rle["counts"], dtype="<u4")
    return (
        struct.pack("<III", int(rle["h"]), int(rle["w"]), counts.size)
        + counts.tobytes()
    )


def _decode_rle(buf: bytes, offset: int) -> tuple[dict, int]:
    h, w, k = struct.unpack_from("<III", buf, offset)
    offset += 12
    counts = np.frombuffer(buf, dtype="<u4", count=k, offset=offset)
    offset += 4 * k
    return {"h": int(h), "w": int(w), "counts": counts.astype(int).tolist()}, offset


def encode_roi(roi: RoIFeature) -> bytes:
    head = struct.pack(
        "<I4fBif",
        roi.image_id,
        *(float(v) for v in roi.box),
        _SOURCE_CODES[roi.source],
        int(roi.label),
        float(roi.iou),
    )
    return head + np.asarray(roi.feature, dtype="<f4").tobytes()


def decode_roi(buf: bytes, d: int, where: str) -> RoIFeature:
    head_size = struct.calcsize("<I4fBif")
    expected = head_size + 4 * d
    if len(buf) != expected:
        raise DatasetError(f"{where}: record is {len(buf)} bytes, expected {expected}")
    image_id, x1, y1, x2, y2, source, label, iou = struct.unpack_from("<I4fBif", buf)
    if source not in _SOURCE_NAMES:
        raise DatasetError(f"{where}: unknown source code {source}")
    feature = np.frombuffer(buf, dtype="<f4", count=d, offset=head_size).copy()
    return RoIFeature(
        image_id=int(image_id),
        box=np.array([x1, y1, x2, y2], dtype=np.float64),
        feature=feature,
        source=_SOURCE_NAMES[source],
        label=int(label),
        iou=float(iou),
    )


def encode_grid(grid: SegFeatureGrid, s: int) -> bytes:
    head = struct.pack(
        "<I4fIi",
        grid.image_id,
        *(float(v) for v in grid.box),
        int(grid.class_id),
        int(grid.roi_index),
    )
    body = np.asarray(grid.grid, dtype="<f4").tobytes()
    if grid.class_id == 0:
        return head + body
    bits = np.packbits(np.asarray(grid.mask_grid, dtype=bool).reshape(-1))
    return head + body + bits.tobytes() + _encode_rle(grid.mask_fullres)


def decode_grid(buf: bytes, s: int, f: int, where: str) -> SegFeatureGrid:
    head_fmt = "<I4fIi"
    head_size = struct.calcsize(head_fmt)
    if len(buf) < head_size + 4 * s * s * f:
        raise DatasetError(f"{where}: record too short for grid tensor")
    image_id, x1, y1, x2, y2, class_id, roi_index = struct.unpack_from(head_fmt, buf)
    offset = head_size
    grid = (
        np.frombuffer(buf, dtype="<f4", count=s * s * f, offset=offset)
        .reshape(s, s, f)
        .copy()
    )
    offset += 4 * s * s * f
    mask_grid = None
    mask_fullres = None
    if class_id != 0:
        n_bytes = (s * s + 7) // 8
        bits = np.frombuffer(buf, dtype=np.uint8, count=n_bytes, offset=offset)
        mask_grid = np.unpackbits(bits)[: s * s].reshape(s, s).astype(bool)
        offset += n_bytes
        mask_fullres, offset = _decode_rle(buf, offset)
    if offset != len(buf):
        raise DatasetError(f"{where}: {len(buf) - offset} trailing bytes in record")
    return SegFeatureGrid(
        image_id=int(image_id),
        box=np.array([x1, y1, x2, y2], dtype=np.float64),
        class_id=int(class_id),
        grid=grid,
        mask_grid=mask_grid,
        mask_fullres=mask_fullres,
        roi_index=int(roi_index),
    )


def encode_annotation(ann: InstanceAnnotation) -> bytes:
    head = struct.pack(
        "<II4f", ann.image_id, ann.class_id, *(float(v) for v in ann.box)
    )
    return head + _encode_rle(ann.mask)


def decode_annotation(buf: bytes, where: str) -> InstanceAnnotation:
    head_size = struct.calcsize("<II4f")
    image_id, class_id, x1, y1, x2, y2 = struct.unpack_from("<II4f", buf)
    mask, offset = _decode_rle(buf, head_size)
    if offset != len(buf):
        raise DatasetError(f"{where}: {len(buf) - offset} trailing bytes in record")
    return InstanceAnnotation(
        image_id=int(image_id),
        class_id=int(class_id),
        box=np.array([x1, y1, x2, y2], dtype=np.float64),
        mask=mask,
    )


# -- file-level reader/writer ---------------------------------------------


class _RecordFile:
    """Writer for one length-prefixed record file; patches the count on close."""

    def __init__(self, path: Path, magic: bytes, dims: tuple[int, int]):
        self.path = Path(path)
        self._fh = open(self.path, "wb")
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


def _read_header(fh, path: Path, magic: bytes) -> tuple[int, tuple[int, int]]:
    head = fh.read(_FILE_HEADER.size)
    if len(head) != _FILE_HEADER.size:
        raise DatasetError(f"{path}: truncated header")
    got_magic, version, count, dim_a, dim_b = _FILE_HEADER.unpack(head)
    if got_magic != magic:
        raise DatasetError(f"{path}: bad magic {got_magic!r}, expected {magic!r}")
    if version != FORMAT_VERSION:
        raise DatasetError(f"{path}: unsupported file version {version}")
    return count, (dim_a, dim_b)


def _iter_records(path: Path, magic: bytes) -> Iterator[tuple[bytes, int, tuple[int, int]]]:
    if not path.is_file():
        raise DatasetError(f"missing file: {path}")
    with open(path, "rb") as fh:
        count, dims = _read_header(fh, path, magic)
        seen = 0
        while True:
            offset = fh.tell()
            prefix = fh.read(_LEN_PREFIX.size)
            if not prefix:
                break
            if len(prefix) != _LEN_PREFIX.size:
                raise DatasetError(f"{path}: truncated length prefix at offset {offset}")
            (length,) = _LEN_PREFIX.unpack(prefix)
            payload = fh.read(length)
            if len(payload) != length:
                raise DatasetError(f"{path}: truncated record at offset {offset}")
            seen += 1
            yield payload, offset, dims
        if seen != count:
            raise DatasetError(f"{path}: header claims {count} records, found {seen}")


def stream_rois(path, index: DatasetIndex, split: str) -> Iterator[RoIFeature]:
    """Lazily stream RoI features of one split, validating each record."""
    fpath = roi_file(Path(path), split)
    for payload, offset, (d, _) in _iter_records(fpath, ROI_MAGIC):
        if d != index.d:
            raise DatasetError(f"{fpath}: header d={d} vs manifest d={index.d}")
        where = f"{fpath} @ {offset}"
        roi = decode_roi(payload, d, where)
        schema.validate_roi(roi, index, where)
        yield roi


def stream_grids(path, index: DatasetIndex, split: str) -> Iterator[SegFeatureGrid]:
    """Lazily stream mask-head grids of one split, validating each record."""
    fpath = grid_file(Path(path), split)
    for payload, offset, (s, f) in _iter_records(fpath, GRID_MAGIC):
        if (s, f) != (index.s, index.f):
            raise DatasetError(
                f"{fpath}: header (s, f)=({s}, {f}) vs manifest "
                f"({index.s}, {index.f})"
            )
        where = f"{fpath} @ {offset}"
        grid = decode_grid(payload, s, f, where)
        schema.validate_grid(grid, index, where)
        yield grid


def stream_annotations(path, index: DatasetIndex, split: str) -> Iterator[InstanceAnnotation]:
    fpath = mask_file(Path(path), split)
    for payload, offset, _dims in _iter_records(fpath, MASK_MAGIC):
        where = f"{fpath} @ {offset}"
        ann = decode_annotation(payload, where)
        schema.validate_annotation(ann, index, where)
        yield ann


def load_annotations(path, index: DatasetIndex, split: str) -> list[InstanceAnnotation]:
    return list(stream_annotations(path, index, split))


class DatasetWriter:
    """Single-owner writer that lays down a complete feature store."""

    def __init__(self, path, index: DatasetIndex):
        index.validate()
        self.root = Path(path)
        self.root.mkdir(parents=True, exist_ok=True)
        self.index = index
        self._rois = {}
        self._grids = {}
        self._masks = {}
        for split in index.splits:
            self._rois[split] = _RecordFile(
                roi_file(self.root, split), ROI_MAGIC, (index.d, 0)
            )
            self._grids[split] = _RecordFile(
                grid_file(self.root, split), GRID_MAGIC, (index.s, index.f)
            )
            self._masks[split] = _RecordFile(
                mask_file(self.root, split), MASK_MAGIC, (0, 0)
            )

    def add_roi(self, split: str, roi: RoIFeature) -> None:
        self._rois[split].write(encode_roi(roi))

    def add_grid(self, split: str, grid: SegFeatureGrid) -> None:
        self._grids[split].write(encode_grid(grid, self.index.s))

    def add_annotation(self, split: str, ann: InstanceAnnotation) -> None:
        self._masks[split].write(encode_annotation(ann))

    def close(self) -> None:
        for table in (self._rois, self._grids, self._masks):
            for rec in table.values():
                rec.close()
        save_manifest(self.root, self.index)

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        self.close()
        return False


def validate_dataset(path) -> dict:
    """Full validation pass; returns per-split record counts.

    Walks every record of every split, re-checking the per-record
    invariants, and raises ``DatasetError`` (naming file and offset) on
    the first violation.
    """
    index = load_dataset(path)
    counts = {}
    for split in index.splits:
        n_rois = sum(1 for _ in stream_rois(path, index, split))
        n_grids = sum(1 for _ in stream_grids(path, index, split))
        n_anns = sum(1 for _ in stream_annotations(path, index, split))
        counts[split] = {"rois": n_rois, "grids": n_grids, "annotations": n_anns}
    return counts
