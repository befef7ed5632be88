import json
from pathlib import Path

import pytest

from kernseg.cli import main


def write_synth_config(path: Path) -> Path:
    doc = {
        "num_classes": 2,
        "images_per_split": {"train": 5, "val": 2, "test": 3},
        "objects_per_image": [1, 2],
        "d": 8,
        "s": 8,
        "f": 6,
        "separation": 8.0,
        "noise": 1.0,
        "seed": 4,
        "image_width": 64,
        "image_height": 48,
    }
    cfg = path / "synth.json"
    cfg.write_text(json.dumps(doc))
    return cfg


def write_run_config(path: Path, dataset: Path, out: Path) -> Path:
    doc = {
        "dataset": str(dataset),
        "output_dir": str(out),
        "seed": 0,
        "detection": {
            "sigma": 3.0,
            "lam": 1e-5,
            "n_centers": 60,
            "minibootstrap": {"n_batches": 2, "batch_size": 30, "seed": 0},
        },
        "segmentation": {
            "sigma": 3.0,
            "lam": 1e-5,
            "n_centers": 60,
            "sampling_factor": 0.5,
        },
    }
    cfg = path / "run.json"
    cfg.write_text(json.dumps(doc))
    return cfg


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    synth_cfg = write_synth_config(root)
    dataset = root / "data"
    assert main(["gen-synthetic", "--config", str(synth_cfg), "--out", str(dataset)]) == 0
    out = root / "out"
    run_cfg = write_run_config(root, dataset, out)
    return {"root": root, "dataset": dataset, "out": out, "run_cfg": run_cfg}


def test_gen_and_validate(workspace, capsys):
    assert main(["validate-dataset", str(workspace["dataset"])]) == 0
    out = capsys.readouterr().out
    assert "is valid" in out and "train:" in out


def test_validate_rejects_garbage(tmp_path, capsys):
    (tmp_path / "manifest.json").write_text("{}")
    assert main(["validate-dataset", str(tmp_path)]) == 1
    assert "error:" in capsys.readouterr().err


def test_train_predict_eval_cycle(workspace, capsys):
    assert main(["train", "--config", str(workspace["run_cfg"])]) == 0
    out_dir = workspace["out"]
    assert (out_dir / "detection_bank" / "bank.json").is_file()
    assert (out_dir / "timing.json").is_file()

    assert main(["predict", "--config", str(workspace["run_cfg"]), "--split", "test"]) == 0
    assert (out_dir / "detections_test.jsonl").is_file()
    assert (out_dir / "masks_test.jsonl").is_file()

    assert main(["eval", "--config", str(workspace["run_cfg"]), "--split", "test"]) == 0
    captured = capsys.readouterr().out
    assert "mAP50 bbox(%)" in captured
    report = json.loads((out_dir / "eval_test.json").read_text())
    assert "bbox" in report and report["bbox"]["map_bbox"]["0.5"] >= 0.0


def test_gt_mask_eval_command(workspace, capsys):
    assert main(["gt-mask-eval", "--config", str(workspace["run_cfg"])]) == 0
    out = capsys.readouterr().out
    assert "gt-box segm mAP50" in out
    assert (workspace["out"] / "gt_mask_eval_test.json").is_file()


def test_sweep_r_command(workspace, tmp_path, capsys):
    sweep_out = tmp_path / "sweep"
    assert (
        main(
            [
                "sweep-r",
                "--config",
                str(workspace["run_cfg"]),
                "--r-values",
                "1.0,0.3,0.01",
                "--out",
                str(sweep_out),
            ]
        )
        == 0
    )
    csv_lines = (sweep_out / "sweep_r.csv").read_text().strip().splitlines()
    assert len(csv_lines) == 4
    assert csv_lines[0].startswith("r,")
    details = json.loads((sweep_out / "sweep_r_details.json").read_text())
    assert [row["r"] for row in details] == [1.0, 0.3, 0.01]


def test_missing_dataset_is_validation_error(workspace, tmp_path, capsys):
    doc = json.loads(workspace["run_cfg"].read_text())
    doc["dataset"] = str(tmp_path / "nope")
    bad_cfg = tmp_path / "bad.json"
    bad_cfg.write_text(json.dumps(doc))
    assert main(["train", "--config", str(bad_cfg)]) == 1
    assert "does not exist" in capsys.readouterr().err


def test_seed_override_changes_models(workspace, tmp_path):
    out_a = tmp_path / "a"
    out_b = tmp_path / "b"
    assert main(["train", "--config", str(workspace["run_cfg"]), "--out", str(out_a), "--seed", "1"]) == 0
    assert main(["train", "--config", str(workspace["run_cfg"]), "--out", str(out_b), "--seed", "1"]) == 0
    blob_a = (out_a / "detection_bank" / "falkon_1.fkn").read_bytes()
    blob_b = (out_b / "detection_bank" / "falkon_1.fkn").read_bytes()
    assert blob_a == blob_b  # same seed, bit-identical banks
    assert json.loads((out_a / "config.json").read_text())["seed"] == 1


def test_train_grid_search_flag(workspace, tmp_path, capsys):
    doc = json.loads(workspace["run_cfg"].read_text())
    doc["output_dir"] = str(tmp_path / "gs")
    doc["grid_search"] = {"detection_sigma": [3.0, 500.0], "segmentation_sigma": [3.0]}
    cfg = tmp_path / "gs.json"
    cfg.write_text(json.dumps(doc))
    assert main(["train", "--config", str(cfg), "--grid-search"]) == 0
    out = capsys.readouterr().out
    assert "grid search picked" in out
    saved = json.loads((tmp_path / "gs" / "config.json").read_text())
    assert saved["detection"]["sigma"] == 3.0
