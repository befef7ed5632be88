import numpy as np
import pytest

from kernseg import (
    FalkonClassifier,
    InputError,
    MinibootstrapConfig,
    OnlineDetector,
    assign_roi_labels,
    iou_matrix,
    minibootstrap_train,
)
from kernseg.detection import _round_seed
from kernseg.exceptions import ConfigError
from kernseg.rle import rle_encode
from kernseg.store import ImageRecord, InstanceAnnotation, RoIFeature
from kernseg.store.schema import (
    LABEL_BACKGROUND,
    LABEL_IGNORED,
    SOURCE_GROUND_TRUTH,
    SOURCE_RPN_PROPOSAL,
)


def make_roi(box, feature=None, source=SOURCE_RPN_PROPOSAL, label=0, image_id=0):
    return RoIFeature(
        image_id=image_id,
        box=np.asarray(box, dtype=np.float64),
        feature=np.asarray(feature if feature is not None else np.zeros(4), dtype=np.float32),
        source=source,
        label=label,
    )


def make_ann(box, class_id, image_id=0, hw=(100, 100)):
    mask = np.zeros(hw, dtype=bool)
    mask[int(box[1]) : int(box[3]), int(box[0]) : int(box[2])] = True
    return InstanceAnnotation(
        image_id=image_id, class_id=class_id, box=np.asarray(box, float), mask=rle_encode(mask)
    )


class TestAssignment:
    def test_exact_match_is_positive(self):
        ann = make_ann((10, 10, 30, 30), class_id=2)
        roi = make_roi((10, 10, 30, 30))
        assign_roi_labels([roi], [ann])
        assert roi.label == 2 and roi.iou == 1.0

    def test_band_iou_is_ignored(self):
        ann = make_ann((0, 0, 100, 45), class_id=1)
        roi = make_roi((0, 0, 100, 100))  # IoU 0.45
        assign_roi_labels([roi], [ann], iou_fg=0.5, iou_bg=0.3)
        assert roi.label == LABEL_IGNORED

    def test_empty_ground_truth_all_background(self):
        rois = [make_roi((0, 0, 10, 10)), make_roi((5, 5, 20, 20))]
        assign_roi_labels(rois, [])
        assert all(r.label == LABEL_BACKGROUND for r in rois)

    def test_gt_sourced_always_positive(self):
        ann = make_ann((10, 10, 30, 30), class_id=1)
        roi = make_roi((60, 60, 90, 90), source=SOURCE_GROUND_TRUTH, label=1)
        assign_roi_labels([roi], [ann])
        assert roi.label == 1 and roi.iou == 1.0

    def test_matches_bruteforce_max_iou(self, rng):
        anns = [
            make_ann((5, 5, 40, 40), 1),
            make_ann((50, 50, 90, 90), 2),
            make_ann((20, 60, 45, 95), 3),
        ]
        rois = []
        for _ in range(20):
            xy = rng.uniform(0, 60, size=2)
            wh = rng.uniform(5, 40, size=2)
            rois.append(make_roi((*xy, *(xy + wh))))
        assign_roi_labels(rois, anns, iou_fg=0.5, iou_bg=0.3)
        gt_boxes = np.stack([a.box for a in anns])
        for roi in rois:
            ious = iou_matrix(roi.box[None], gt_boxes)[0]
            best = int(np.argmax(ious))
            if ious[best] >= 0.5:
                assert roi.label == anns[best].class_id
            elif ious[best] < 0.3:
                assert roi.label == LABEL_BACKGROUND
            else:
                assert roi.label == LABEL_IGNORED

    def test_bad_thresholds_rejected(self):
        with pytest.raises(ConfigError):
            assign_roi_labels([], [], iou_fg=0.3, iou_bg=0.5)


def hard_negative_bruteforce(model, pool, batch_idx, threshold):
    """Score-all-then-filter oracle for one mining round."""
    scores = model.decision_function(pool[batch_idx])
    return batch_idx[scores >= threshold]


class TestMinibootstrap:
    def setup_problem(self, rng, n_pos=30, n_neg=400, d=4):
        pos = rng.normal(size=(n_pos, d)) + 4.0
        neg = rng.normal(size=(n_neg, d)) - 1.0
        # a band of borderline negatives near the positives
        neg[: n_neg // 4] += 4.0
        return pos, neg

    def test_single_batch_no_mining(self, rng):
        pos, neg = self.setup_problem(rng)
        cfg = MinibootstrapConfig(n_batches=1, batch_size=100, seed=0)
        model, stats = minibootstrap_train(
            pos, neg, cfg, sigma=2.0, lam=1e-5, n_centers=50
        )
        assert stats.rounds == 1
        assert stats.negatives_visited == 100
        assert stats.negatives_kept == 100

    def test_visited_capped_by_pool(self, rng):
        pos, neg = self.setup_problem(rng, n_neg=150)
        cfg = MinibootstrapConfig(n_batches=4, batch_size=60, seed=0)
        _, stats = minibootstrap_train(pos, neg, cfg, sigma=2.0, lam=1e-5, n_centers=40)
        assert stats.negatives_visited == 150  # min(pool, n_B * BS)

    def test_benchmark_schedule_visits_thirty_thousand(self, rng):
        # 15 batches of 2000 against a 50k pool: exactly 30000 visited
        pos, neg = self.setup_problem(rng, n_pos=40, n_neg=50_000, d=4)
        cfg = MinibootstrapConfig(n_batches=15, batch_size=2000, seed=0)
        _, stats = minibootstrap_train(pos, neg, cfg, sigma=2.0, lam=1e-5, n_centers=50)
        assert stats.negatives_visited == 30_000
        assert stats.rounds == 15
        assert stats.negatives_kept <= cfg.max_negatives_kept

    def test_mining_matches_bruteforce(self, rng):
        pos, neg = self.setup_problem(rng)
        cfg = MinibootstrapConfig(
            n_batches=3, batch_size=80, hard_threshold=-1.0, seed=7
        )
        model, stats = minibootstrap_train(
            pos, neg, cfg, sigma=2.0, lam=1e-5, n_centers=60, seed=7
        )
        # replay: rebuild the same batches and mine with the brute-force rule
        order = np.random.default_rng(7).permutation(neg.shape[0])
        visited = order[: cfg.n_batches * cfg.batch_size]
        batches = [
            visited[i : i + cfg.batch_size]
            for i in range(0, visited.size, cfg.batch_size)
        ]

        def fit(active, round_index):
            X = np.vstack([pos, neg[active]])
            y = np.concatenate([np.ones(len(pos)), -np.ones(active.size)])
            return FalkonClassifier(
                sigma=2.0, lam=1e-5, n_centers=60,
                seed=_round_seed(7, round_index),
            ).fit(X, y)

        active = batches[0]
        ref = fit(active, 0)
        for round_index, batch in enumerate(batches[1:], start=1):
            hard = hard_negative_bruteforce(ref, neg, batch, cfg.hard_threshold)
            active = np.concatenate([active, hard])
            ref = fit(active, round_index)
        assert stats.negatives_kept == active.size
        assert np.array_equal(model.alpha_, ref.alpha_)
        assert np.array_equal(model.centers_, ref.centers_)

    def test_deterministic_given_seed(self, rng):
        pos, neg = self.setup_problem(rng)
        cfg = MinibootstrapConfig(n_batches=3, batch_size=50, seed=3)
        m1, s1 = minibootstrap_train(pos, neg, cfg, sigma=2.0, lam=1e-5, n_centers=40)
        m2, s2 = minibootstrap_train(pos, neg, cfg, sigma=2.0, lam=1e-5, n_centers=40)
        assert np.array_equal(m1.alpha_, m2.alpha_)
        assert np.array_equal(m1.centers_, m2.centers_)
        assert s1.per_round_kept == s2.per_round_kept

    def test_active_set_bounded(self, rng):
        pos, neg = self.setup_problem(rng, n_neg=600)
        cap = 120
        cfg = MinibootstrapConfig(
            n_batches=5, batch_size=100, hard_threshold=-10.0,  # keep everything
            max_negatives_kept=cap, seed=0,
        )
        _, stats = minibootstrap_train(pos, neg, cfg, sigma=2.0, lam=1e-5, n_centers=40)
        assert all(k <= cap + cfg.batch_size for k in stats.per_round_kept)
        assert stats.per_round_kept[-1] <= cap

    def test_empty_inputs_rejected(self, rng):
        pos, neg = self.setup_problem(rng)
        cfg = MinibootstrapConfig(n_batches=2, batch_size=10)
        with pytest.raises(InputError):
            minibootstrap_train(np.zeros((0, 4)), neg, cfg, sigma=1.0, lam=1e-4, n_centers=5)
        with pytest.raises(InputError):
            minibootstrap_train(pos, np.zeros((0, 4)), cfg, sigma=1.0, lam=1e-4, n_centers=5)


def two_class_training_data(rng, n_images=8):
    """Tiny images with one class-1 and one class-2 object each."""
    rois_by_image, anns_by_image = {}, {}
    for image_id in range(n_images):
        anns = [
            make_ann((10, 10, 40, 40), 1, image_id=image_id),
            make_ann((55, 55, 90, 90), 2, image_id=image_id),
        ]
        rois = []
        for ann in anns:
            feat = np.zeros(4)
            feat[ann.class_id - 1] = 6.0
            rois.append(
                make_roi(
                    ann.box, feat + rng.normal(size=4),
                    source=SOURCE_GROUND_TRUTH, label=ann.class_id, image_id=image_id,
                )
            )
            jit = ann.box + rng.uniform(-2, 2, size=4)
            rois.append(make_roi(jit, feat + rng.normal(size=4), image_id=image_id))
        for _ in range(3):
            box = np.array([0.0, 0.0, 8.0, 8.0]) + rng.uniform(0, 2, size=4)
            rois.append(make_roi(box, rng.normal(size=4), image_id=image_id))
        rois_by_image[image_id] = rois
        anns_by_image[image_id] = anns
    return rois_by_image, anns_by_image


@pytest.fixture(scope="module")
def fitted_detector():
    rng = np.random.default_rng(0)
    rois_by_image, anns_by_image = two_class_training_data(rng)
    det = OnlineDetector(
        num_classes=2,
        sigma=2.0,
        lam=1e-5,
        n_centers=60,
        bootstrap=MinibootstrapConfig(n_batches=2, batch_size=30, seed=0),
        seed=0,
    )
    det.fit(rois_by_image, anns_by_image)
    return det, rois_by_image, anns_by_image


class TestOnlineDetector:
    def test_detects_training_objects(self, fitted_detector, rng):
        det, rois_by_image, anns_by_image = fitted_detector
        image = ImageRecord(id=0, width=100, height=100, split="train")
        results = det.predict(rois_by_image[0], image)
        assert results, "no detections on training data"
        assert all(r.score >= det.score_threshold for r in results)
        found = {r.class_id for r in results if r.score > 0}
        assert found == {1, 2}
        scores = [r.score for r in results]
        assert scores == sorted(scores, reverse=True)

    def test_empty_roi_list(self, fitted_detector):
        det, *_ = fitted_detector
        image = ImageRecord(id=0, width=100, height=100, split="train")
        assert det.predict([], image) == []

    def test_boxes_clipped_to_image(self, fitted_detector):
        det, rois_by_image, _ = fitted_detector
        image = ImageRecord(id=0, width=60, height=60, split="train")
        for r in det.predict(rois_by_image[0], image):
            x1, y1, x2, y2 = r.box
            assert 0 <= x1 < x2 <= 60 and 0 <= y1 < y2 <= 60

    def test_threshold_monotonicity(self, fitted_detector):
        det, rois_by_image, _ = fitted_detector
        image = ImageRecord(id=0, width=100, height=100, split="train")
        counts = []
        for thr in (-1.0, -0.5, 0.0, 0.5, 0.9):
            det.score_threshold = thr
            counts.append(len(det.predict(rois_by_image[0], image)))
        det.score_threshold = 0.0
        assert counts == sorted(counts, reverse=True)

    def test_per_class_nms_keeps_both_classes(self, fitted_detector):
        det, *_ = fitted_detector
        # two identical boxes, different classes: both survive because NMS is per class
        feat1 = np.zeros(4)
        feat1[0] = 6.0
        feat2 = np.zeros(4)
        feat2[1] = 6.0
        rois = [
            make_roi((10, 10, 40, 40), feat1),
            make_roi((10, 10, 40, 40), feat2),
        ]
        image = ImageRecord(id=0, width=100, height=100, split="train")
        results = det.predict(rois, image)
        assert {r.class_id for r in results} == {1, 2}

    def test_fit_determinism(self, rng):
        rois_a, anns_a = two_class_training_data(np.random.default_rng(5), n_images=4)
        rois_b, anns_b = two_class_training_data(np.random.default_rng(5), n_images=4)
        kwargs = dict(
            num_classes=2, sigma=2.0, lam=1e-5, n_centers=40,
            bootstrap=MinibootstrapConfig(n_batches=2, batch_size=20, seed=1), seed=1,
        )
        d1 = OnlineDetector(**kwargs).fit(rois_a, anns_a)
        d2 = OnlineDetector(**kwargs).fit(rois_b, anns_b)
        for c in (1, 2):
            assert np.array_equal(d1.classifiers_[c].alpha_, d2.classifiers_[c].alpha_)
            assert np.array_equal(d1.regressors_[c].weights_, d2.regressors_[c].weights_)

    def test_positives_without_ground_truth_get_identity_refinement(self, rng):
        # gt-sourced RoIs in an image with no annotations: classifier still
        # trains, refinement falls back to near-zero deltas
        rois = [
            make_roi((5, 5, 30, 30), rng.normal(size=4) + 5,
                     source=SOURCE_GROUND_TRUTH, label=1)
            for _ in range(6)
        ] + [make_roi((40, 40, 60, 60), rng.normal(size=4)) for _ in range(12)]
        det = OnlineDetector(
            num_classes=1, sigma=2.0, lam=1e-4, n_centers=10,
            bootstrap=MinibootstrapConfig(n_batches=1, batch_size=10, seed=0), seed=0,
        )
        det.fit({0: rois}, {0: []})
        feats = np.stack([r.feature for r in rois[:3]]).astype(np.float64)
        assert np.abs(det.regressors_[1].predict(feats)).max() < 1e-6

    def test_class_without_positives_skipped(self, rng):
        rois_by_image, anns_by_image = two_class_training_data(rng, n_images=3)
        det = OnlineDetector(
            num_classes=3,  # class 3 has no data
            sigma=2.0, lam=1e-5, n_centers=30,
            bootstrap=MinibootstrapConfig(n_batches=1, batch_size=20, seed=0), seed=0,
        )
        with pytest.warns(UserWarning, match="class 3"):
            det.fit(rois_by_image, anns_by_image)
        assert det.classifiers_[3] is None
        image = ImageRecord(id=0, width=100, height=100, split="train")
        results = det.predict(rois_by_image[0], image)
        assert all(r.class_id in (1, 2) for r in results)
