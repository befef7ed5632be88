"""Feature capture from a region-based instance segmentation network.

Two capture points on torchvision's Mask R-CNN (ResNet50-FPN):

- detection features: the box head's last hidden activation, the
  1024-dimensional vector fed to the final class/box layers;
- mask features: the activation entering the mask predictor's final 1x1
  class convolution, a 28 x 28 x 256 map per region.

The network runs image by image in eval mode under ``no_grad``, so a
re-export with the same checkpoint and inputs is bit-identical.
"""

from __future__ import annotations

import numpy as np
import torch
from torchvision.models.detection import maskrcnn_resnet50_fpn
from torchvision.models.detection.transform import resize_boxes


def build_model(
    checkpoint: str,
    num_classes: int = 91,
    min_size: int = 800,
    max_size: int = 1333,
    seed: int = 0,
):
    """Construct the extraction network.

    ``checkpoint`` is either a path to a state dict or the literal
    ``"random"`` for a seeded fresh initialization (useful where
    downloading pretrained weights is impossible; capture shapes and
    determinism are unaffected).
    """
    torch.manual_seed(seed)
    model = maskrcnn_resnet50_fpn(
        weights=None,
        weights_backbone=None,
        num_classes=num_classes,
        min_size=min_size,
        max_size=max_size,
    )
    if checkpoint != "random":
        state = torch.load(checkpoint, map_location="cpu", weights_only=True)
        if isinstance(state, dict) and "model" in state:
            state = state["model"]
        model.load_state_dict(state)
    model.eval()
    return model


class FeatureCapture:
    """Runs the backbone/RPN once per image and pools features per box."""

    def __init__(self, model, proposals_per_image: int = 300):
        self.model = model
        self.proposals_per_image = proposals_per_image

    @torch.no_grad()
    def run(self, image_chw: torch.Tensor):
        """Returns a per-image context with proposals in original coords."""
        model = self.model
        images, _ = model.transform([image_chw])
        features = model.backbone(images.tensors)
        proposals, _ = model.rpn(images, features)
        boxes = proposals[0][: self.proposals_per_image]
        # drop degenerate or non-finite RPN output
        keep = (
            torch.isfinite(boxes).all(dim=1)
            & (boxes[:, 2] > boxes[:, 0])
            & (boxes[:, 3] > boxes[:, 1])
        )
        boxes = boxes[keep]
        orig_size = (image_chw.shape[1], image_chw.shape[2])
        ctx = _ImageContext(
            model=model,
            features=features,
            image_sizes=images.image_sizes,
            orig_size=orig_size,
        )
        ctx.proposals = resize_boxes(boxes, images.image_sizes[0], orig_size)
        return ctx


class _ImageContext:
    def __init__(self, model, features, image_sizes, orig_size):
        self.model = model
        self.features = features
        self.image_sizes = image_sizes
        self.orig_size = orig_size  # (h, w)
        self.proposals = None

    def _to_network_coords(self, boxes_orig: torch.Tensor) -> torch.Tensor:
        return resize_boxes(boxes_orig, self.orig_size, self.image_sizes[0])

    @torch.no_grad()
    def box_features(self, boxes_orig: torch.Tensor) -> np.ndarray:
        """Detection-head penultimate features, one row per box."""
        if boxes_orig.shape[0] == 0:
            return np.zeros((0, 0), dtype=np.float32)
        heads = self.model.roi_heads
        boxes = self._to_network_coords(boxes_orig)
        pooled = heads.box_roi_pool(self.features, [boxes], self.image_sizes)
        return heads.box_head(pooled).cpu().numpy().astype(np.float32)

    @torch.no_grad()
    def mask_grids(self, boxes_orig: torch.Tensor) -> np.ndarray:
        """Mask-head penultimate grids, (n, s, s, f)."""
        if boxes_orig.shape[0] == 0:
            return np.zeros((0, 0, 0, 0), dtype=np.float32)
        heads = self.model.roi_heads
        boxes = self._to_network_coords(boxes_orig)
        pooled = heads.mask_roi_pool(self.features, [boxes], self.image_sizes)
        hidden = heads.mask_head(pooled)
        penultimate = torch.relu(heads.mask_predictor.conv5_mask(hidden))
        # (n, f, s, s) -> (n, s, s, f)
        return penultimate.permute(0, 2, 3, 1).cpu().numpy().astype(np.float32)
