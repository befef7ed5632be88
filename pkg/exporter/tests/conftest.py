import json

import numpy as np
import pytest
from PIL import Image, ImageDraw


def ellipse_mask(width, height, box):
    mask = Image.new("1", (width, height), 0)
    ImageDraw.Draw(mask).ellipse(box, fill=1)
    return np.asarray(mask, dtype=bool)


def rle_encode(mask):
    flat = mask.reshape(-1)
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate([[0], change, [flat.size]])
    counts = np.diff(bounds).tolist()
    if flat[0]:
        counts = [0] + counts
    return {"h": int(mask.shape[0]), "w": int(mask.shape[1]), "counts": counts}


@pytest.fixture(scope="session")
def toy_dataset(tmp_path_factory):
    """Three 96x128 images with drawn ellipses and matching annotations."""
    root = tmp_path_factory.mktemp("toy")
    images_dir = root / "frames"
    images_dir.mkdir()
    width, height = 128, 96
    rng = np.random.default_rng(0)

    boxes = [
        [(20, 15, 70, 60), (80, 40, 120, 85)],
        [(10, 30, 60, 80)],
        [(40, 10, 100, 70)],
    ]
    classes = [[1, 2], [2], [1]]

    images, instances = [], []
    for image_id, (image_boxes, image_classes) in enumerate(zip(boxes, classes)):
        canvas = Image.fromarray(
            (rng.random((height, width, 3)) * 80 + 60).astype(np.uint8)
        )
        draw = ImageDraw.Draw(canvas)
        for box, cls in zip(image_boxes, image_classes):
            color = (220, 60, 40) if cls == 1 else (40, 90, 220)
            draw.ellipse(box, fill=color)
            mask = ellipse_mask(width, height, box)
            instances.append(
                {
                    "image_id": image_id,
                    "class_id": cls,
                    "box": [float(v) for v in box],
                    "mask": rle_encode(mask),
                }
            )
        filename = f"img{image_id}.png"
        canvas.save(images_dir / filename)
        images.append(
            {
                "id": image_id,
                "file": filename,
                "width": width,
                "height": height,
                "split": "train",
            }
        )

    ann_path = root / "annotations.json"
    ann_path.write_text(
        json.dumps(
            {"class_names": ["red_thing", "blue_thing"], "images": images,
             "instances": instances}
        )
    )
    return {"root": root, "annotations": ann_path, "images_dir": images_dir}
