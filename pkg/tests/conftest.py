import numpy as np
import pytest

from kernseg.store import SyntheticConfig, generate_synthetic


@pytest.fixture(scope="session")
def tiny_store(tmp_path_factory):
    """Small synthetic dataset shared by store/pipeline tests."""
    path = tmp_path_factory.mktemp("tiny_store") / "data"
    cfg = SyntheticConfig(
        num_classes=2,
        images_per_split={"train": 6, "val": 2, "test": 4},
        objects_per_image=(1, 2),
        d=8,
        s=8,
        f=6,
        separation=8.0,
        noise=1.0,
        seed=11,
        image_width=64,
        image_height=48,
        proposals_per_gt=3,
        background_rois=2,
    )
    index = generate_synthetic(cfg, path)
    return {"path": path, "index": index, "config": cfg}


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# Criterion labels printed one per line after an acceptance run.
ACCEPTANCE_LABELS = {
    "test_solver_correctness": "solver correctness vs exact oracle (10 problems, <5s each)",
    "test_synthetic_end_to_end": "synthetic end-to-end mAP50 bbox >= 0.95, segm >= 0.90, < 3 min",
    "test_sampling_factor_sweep": "r-sweep: exact ceil counts, non-increasing time, mAP stability",
    "test_gt_box_mode_ordering": "GT-box segm mAP >= detection-driven segm mAP at both thresholds",
    "test_evaluation_oracle": "average precision matches brute-force reference (200 instances)",
    "test_minibootstrap_oracle": "minibootstrap hard negatives match brute-force selection",
    "test_invariant_mask_confinement": "property: masks confined to their boxes (1000 cases)",
    "test_invariant_nms_idempotence": "property: NMS idempotent (1000 cases)",
    "test_invariant_serialization_roundtrip": "property: model serialization bit-exact (1000 cases)",
    "test_invariant_ap_rank_dependence": "property: AP depends on score ranks only (1000 cases)",
    "test_invariant_box_delta_roundtrip": "property: box delta encode/apply inverse (1000 cases)",
    "test_invariant_format_validation": "property: store format round-trip validates (1000 cases)",
}


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = []
    for status in ("passed", "failed", "error"):
        for report in terminalreporter.stats.get(status, []):
            name = getattr(report, "location", (None, None, ""))[2]
            base = name.split("[")[0]
            if base in ACCEPTANCE_LABELS and "test_acceptance" in str(report.nodeid):
                verdict = "PASS" if status == "passed" else "FAIL"
                lines.append((base, f"[{verdict}] {ACCEPTANCE_LABELS[base]}"))
    if lines:
        terminalreporter.write_sep("=", "acceptance criteria")
        seen = set()
        for base, line in lines:
            if base not in seen:
                seen.add(base)
                terminalreporter.write_line(line)
