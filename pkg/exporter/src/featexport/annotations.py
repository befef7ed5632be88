"""Input annotation schema: one JSON file describing images and instances.

```json
{
  "class_names": ["mug", "drill"],
  "images": [
    {"id": 0, "file": "frames/000001.png", "width": 640, "height": 480,
     "split": "train"}
  ],
  "instances": [
    {"image_id": 0, "class_id": 1, "box": [x1, y1, x2, y2],
     "mask": {"h": 480, "w": 640, "counts": [...]}}
  ]
}
```

Image files are resolved relative to an images directory; masks are
row-major uncompressed RLE at image resolution.
"""

from __future__ import annotations

import json
from dataclasses import dataclass


@dataclass
class AnnotatedImage:
    id: int
    file: str
    width: int
    height: int
    split: str


@dataclass
class Instance:
    image_id: int
    class_id: int
    box: tuple[float, float, float, float]
    mask: dict


@dataclass
class AnnotationSet:
    class_names: list[str]
    images: list[AnnotatedImage]
    instances: list[Instance]

    def by_image(self, image_id: int) -> list[Instance]:
        return [inst for inst in self.instances if inst.image_id == image_id]

    def splits(self) -> list[str]:
        seen = []
        for img in self.images:
            if img.split not in seen:
                seen.append(img.split)
        return seen


def load_annotations(path) -> AnnotationSet:
    with open(path) as fh:
        doc = json.load(fh)
    images = [AnnotatedImage(**entry) for entry in doc["images"]]
    ids = [img.id for img in images]
    if len(ids) != len(set(ids)):
        raise ValueError(f"{path}: duplicate image ids")
    instances = [
        Instance(
            image_id=int(e["image_id"]),
            class_id=int(e["class_id"]),
            box=tuple(float(v) for v in e["box"]),
            mask=e["mask"],
        )
        for e in doc["instances"]
    ]
    known = set(ids)
    for inst in instances:
        if inst.image_id not in known:
            raise ValueError(f"{path}: instance references unknown image {inst.image_id}")
        if not (1 <= inst.class_id <= len(doc["class_names"])):
            raise ValueError(f"{path}: class_id {inst.class_id} out of range")
    return AnnotationSet(
        class_names=list(doc["class_names"]), images=images, instances=instances
    )
