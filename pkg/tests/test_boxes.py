import numpy as np
import pytest

from kernseg import (
    InputError,
    apply_bbox_deltas,
    clip_boxes,
    compute_bbox_targets,
    iou_box,
    iou_matrix,
    nms,
)


def reference_nms(boxes, scores, threshold):
    """Quadratic oracle: sort by score, suppress by pairwise IoU."""
    order = sorted(range(len(boxes)), key=lambda i: (-scores[i], i))
    keep = []
    for i in order:
        if all(iou_box(boxes[i], boxes[j]) <= threshold for j in keep):
            keep.append(i)
    return keep


class TestIoU:
    def test_identical_boxes(self):
        assert iou_box((0, 0, 10, 10), (0, 0, 10, 10)) == 1.0

    def test_disjoint_boxes(self):
        assert iou_box((0, 0, 5, 5), (6, 6, 9, 9)) == 0.0

    def test_half_overlap_hand_case(self):
        # inter 50, union 150
        assert iou_box((0, 0, 10, 10), (5, 0, 15, 10)) == pytest.approx(1 / 3)

    def test_matrix_matches_pairwise(self, rng):
        A = np.sort(rng.uniform(0, 50, size=(8, 2, 2)), axis=2).reshape(8, 4)[:, [0, 2, 1, 3]]
        B = np.sort(rng.uniform(0, 50, size=(5, 2, 2)), axis=2).reshape(5, 4)[:, [0, 2, 1, 3]]
        A[:, 2:] += 1.0
        B[:, 2:] += 1.0
        M = iou_matrix(A, B)
        for i in range(8):
            for j in range(5):
                assert M[i, j] == pytest.approx(iou_box(A[i], B[j]), abs=1e-12)


class TestDeltas:
    def test_identity(self):
        box = np.array([[2.0, 3.0, 10.0, 9.0]])
        np.testing.assert_allclose(compute_bbox_targets(box, box), np.zeros((1, 4)))

    def test_hand_case(self):
        p = np.array([[0.0, 0.0, 10.0, 10.0]])
        g = np.array([[5.0, 0.0, 15.0, 10.0]])
        np.testing.assert_allclose(
            compute_bbox_targets(p, g), np.array([[0.5, 0.0, 0.0, 0.0]]), atol=1e-12
        )

    def test_roundtrip_inverse(self, rng):
        p = np.column_stack(
            [
                rng.uniform(0, 20, 50),
                rng.uniform(0, 20, 50),
                rng.uniform(21, 60, 50),
                rng.uniform(21, 60, 50),
            ]
        )
        g = np.column_stack(
            [
                rng.uniform(0, 20, 50),
                rng.uniform(0, 20, 50),
                rng.uniform(21, 60, 50),
                rng.uniform(21, 60, 50),
            ]
        )
        back = apply_bbox_deltas(p, compute_bbox_targets(p, g))
        np.testing.assert_allclose(back, g, atol=1e-9)

    def test_degenerate_box_rejected(self):
        with pytest.raises(InputError):
            compute_bbox_targets(
                np.array([[0.0, 0.0, 0.0, 5.0]]), np.array([[0.0, 0.0, 5.0, 5.0]])
            )
        with pytest.raises(InputError):
            apply_bbox_deltas(np.array([[3.0, 1.0, 3.0, 4.0]]), np.zeros((1, 4)))


class TestClip:
    def test_clip_bounds(self):
        boxes = np.array([[-5.0, -2.0, 120.0, 90.0], [10.0, 10.0, 20.0, 20.0]])
        out = clip_boxes(boxes, 100, 80)
        np.testing.assert_allclose(out[0], [0, 0, 100, 80])
        np.testing.assert_allclose(out[1], boxes[1])


class TestNms:
    def test_duplicate_suppressed(self):
        boxes = np.array([[0, 0, 10, 10], [0, 0, 10, 10.0]])
        keep = nms(boxes, [0.9, 0.8], 0.5)
        assert keep.tolist() == [0]

    def test_matches_quadratic_reference(self, rng):
        for _ in range(20):
            n = int(rng.integers(1, 100))
            xy = rng.uniform(0, 40, size=(n, 2))
            wh = rng.uniform(2, 30, size=(n, 2))
            boxes = np.hstack([xy, xy + wh])
            scores = rng.normal(size=n)
            thr = float(rng.uniform(0.2, 0.7))
            assert nms(boxes, scores, thr).tolist() == reference_nms(boxes, scores, thr)

    def test_idempotent(self, rng):
        n = 60
        xy = rng.uniform(0, 40, size=(n, 2))
        wh = rng.uniform(2, 30, size=(n, 2))
        boxes = np.hstack([xy, xy + wh])
        scores = rng.normal(size=n)
        keep = nms(boxes, scores, 0.4)
        again = nms(boxes[keep], scores[keep], 0.4)
        assert again.tolist() == list(range(len(keep)))

    def test_empty_input(self):
        assert nms(np.zeros((0, 4)), [], 0.5).size == 0

    def test_bad_threshold(self):
        with pytest.raises(InputError):
            nms(np.array([[0, 0, 1, 1.0]]), [1.0], 1.5)
