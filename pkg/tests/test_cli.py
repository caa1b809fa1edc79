import json

import numpy as np
import pytest
import yaml

from echomil import dataset
from echomil.cli import main

TOY_CONFIG = {
    "model": {
        "num_frames": 8,
        "input_size": 64,
        "spatial_feature_dim": 128,
        "attention_hidden_dim": 64,
        "temporal_feature_dim": 128,
        "backbone_depth": "toy",
    },
    "train": {
        "learning_rate": 0.05,
        "optimizer": "sgd_momentum",
        "batch_size": 4,
        "epochs": 1,
        "seed": 3,
    },
}


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """Run synth, split, and train once; later tests reuse the artifacts."""
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    assert main(["synth", "--out", str(data), "--positives", "3", "--negatives", "3",
                 "--frames", "24", "--size", "64", "--seed", "2"]) == 0
    assert main(["split", "--manifest", str(data / "manifest.csv"), "--k", "2",
                 "--seed", "1", "--out", str(data)]) == 0
    config = root / "toy.yaml"
    config.write_text(yaml.safe_dump(TOY_CONFIG))
    run = root / "run"
    assert main(["train", "--config", str(config),
                 "--manifest", str(data / "manifest.csv"),
                 "--folds", str(data / "folds.json"), "--fold", "0",
                 "--out", str(run)]) == 0
    return {"root": root, "data": data, "config": config, "run": run}


class TestSynthAndSplit:
    def test_outputs_exist(self, workdir):
        data = workdir["data"]
        assert (data / "manifest.csv").exists()
        assert (data / "ground_truth.json").exists()
        assert (data / "folds.json").exists()
        assert len(list((data / "videos").glob("*.avi"))) == 6

    def test_train_outputs(self, workdir):
        run = workdir["run"]
        assert (run / "checkpoint.pt").exists()
        assert (run / "checkpoint.pt.json").exists()
        assert (run / "train_log.jsonl").exists()
        resolved = yaml.safe_load((run / "config.resolved").read_text())
        assert resolved["model"]["backbone_depth"] == "toy"
        assert resolved["train"]["epochs"] == 1

    def test_spec_file_with_flag_override(self, tmp_path, capsys):
        spec_file = tmp_path / "gen.yaml"
        spec_file.write_text(yaml.safe_dump({
            "num_positive": 2, "num_negative": 1,
            "frames_per_video": 16, "frame_size": 48,
            "event_window": [4, 6], "seed": 5,
        }))
        out = tmp_path / "data"
        rc = main(["synth", "--config", str(spec_file),
                   "--negatives", "2", "--out", str(out)])
        assert rc == 0
        assert "2 positive, 2 negative" in capsys.readouterr().out
        assert len(list((out / "videos").glob("*.avi"))) == 4

    def test_unknown_spec_key_fails(self, tmp_path, capsys):
        spec_file = tmp_path / "gen.yaml"
        spec_file.write_text("frames_per_vid: 16\n")
        rc = main(["synth", "--config", str(spec_file), "--out", str(tmp_path / "d")])
        assert rc == 1
        assert "frames_per_vid" in capsys.readouterr().err


class TestEval:
    def test_report_and_predictions(self, workdir, tmp_path, capsys):
        data, run = workdir["data"], workdir["run"]
        rc = main(["eval", "--checkpoint", str(run / "checkpoint.pt"),
                   "--manifest", str(data / "manifest.csv"),
                   "--folds", str(data / "folds.json"), "--fold", "0",
                   "--out", str(tmp_path)])
        assert rc == 0
        assert (tmp_path / "report.txt").exists()
        lines = (tmp_path / "predictions.csv").read_text().splitlines()
        assert lines[0] == "id,truth,score,label"
        folds = json.loads((data / "folds.json").read_text())
        held_out = [i for i, f in folds["assignments"].items() if f == 0]
        assert len(lines) == 1 + len(held_out)
        assert "accuracy" in capsys.readouterr().out

    def test_folds_without_fold_index_fails(self, workdir, tmp_path, capsys):
        data, run = workdir["data"], workdir["run"]
        rc = main(["eval", "--checkpoint", str(run / "checkpoint.pt"),
                   "--manifest", str(data / "manifest.csv"),
                   "--folds", str(data / "folds.json"),
                   "--out", str(tmp_path)])
        assert rc == 1
        err = capsys.readouterr().err
        assert err.startswith("error:")
        assert len(err.strip().splitlines()) == 1

    def test_config_supplies_data_section(self, workdir, tmp_path):
        data, run = workdir["data"], workdir["run"]
        config = tmp_path / "eval.yaml"
        config.write_text(yaml.safe_dump({"data": {
            "manifest": str(data / "manifest.csv"),
            "folds": str(data / "folds.json"),
            "val_fold": 0,
        }}))
        rc = main(["eval", "--checkpoint", str(run / "checkpoint.pt"),
                   "--config", str(config), "--out", str(tmp_path)])
        assert rc == 0
        assert (tmp_path / "report.txt").exists()
        assert (tmp_path / "config.resolved").exists()


class TestPredict:
    def test_json_line(self, workdir, capsys):
        data, run = workdir["data"], workdir["run"]
        video = next((data / "videos").glob("syn_pos_*.avi"))
        rc = main(["predict", "--checkpoint", str(run / "checkpoint.pt"),
                   "--video", str(video)])
        assert rc == 0
        payload = json.loads(capsys.readouterr().out.strip())
        assert payload["final_label"] in (-1, 1)
        assert payload["id"] == video.stem
        assert len(payload["votes"]) == 3
        assert all(0.0 <= s <= 1.0 for s in payload["scores"])

    def test_video_matching_clip_length_gets_one_vote(self, workdir, tmp_path, capsys):
        # T equal to the clip length means single-frame blocks: one collection
        rng = np.random.default_rng(0)
        frames = rng.integers(0, 256, size=(8, 64, 64, 3), dtype=np.uint8)
        video = tmp_path / "tiny.avi"
        dataset.write_video(video, frames)
        rc = main(["predict", "--checkpoint", str(workdir["run"] / "checkpoint.pt"),
                   "--video", str(video)])
        assert rc == 0
        payload = json.loads(capsys.readouterr().out.strip())
        assert len(payload["votes"]) == 1
        assert payload["final_label"] == payload["votes"][0]


class TestHeatmapCommand:
    def test_files_written(self, workdir, tmp_path):
        data, run = workdir["data"], workdir["run"]
        video = next((data / "videos").glob("syn_neg_*.avi"))
        rc = main(["heatmap", "--checkpoint", str(run / "checkpoint.pt"),
                   "--video", str(video), "--out", str(tmp_path)])
        assert rc == 0
        assert len(list(tmp_path.glob("*_frame*.png"))) == 8
        assert len(list(tmp_path.glob("*_overlay.avi"))) == 1


class TestCvCommand:
    def test_fixed_output_names(self, workdir, tmp_path):
        data = workdir["data"]
        rc = main(["cv", "--config", str(workdir["config"]),
                   "--manifest", str(data / "manifest.csv"),
                   "--folds", str(data / "folds.json"),
                   "--out", str(tmp_path)])
        assert rc == 0
        assert (tmp_path / "cv_report.json").exists()
        assert (tmp_path / "report.txt").exists()
        assert (tmp_path / "config.resolved").exists()
        blob = json.loads((tmp_path / "cv_report.json").read_text())
        assert blob["k"] == 2
        assert len(blob["folds"]) == 2

    def test_seed_override_lands_in_resolved_config(self, workdir, tmp_path):
        data = workdir["data"]
        rc = main(["cv", "--config", str(workdir["config"]),
                   "--manifest", str(data / "manifest.csv"),
                   "--folds", str(data / "folds.json"),
                   "--seed", "99", "--out", str(tmp_path)])
        assert rc == 0
        resolved = yaml.safe_load((tmp_path / "config.resolved").read_text())
        assert resolved["train"]["seed"] == 99


class TestErrorPaths:
    def test_unknown_config_key(self, tmp_path, capsys):
        bad = tmp_path / "bad.yaml"
        bad.write_text("modle:\n  num_frames: 8\n")
        rc = main(["cv", "--config", str(bad), "--out", str(tmp_path / "out")])
        assert rc == 1
        assert "modle" in capsys.readouterr().err

    def test_missing_manifest(self, tmp_path, capsys):
        rc = main(["cv", "--out", str(tmp_path / "out")])
        assert rc == 1
        assert "manifest" in capsys.readouterr().err
