import csv
import json

import pytest

from stormadapt.cli import dispatch


@pytest.fixture
def config_file(tmp_path):
    """A config for 48 px scenes and a tiny network, trained for three steps."""
    raw = {
        "data": {
            "root": str(tmp_path / "data"),
            "n_train": 4,
            "n_val": 2,
            "width": 48,
            "height": 48,
            "object_count": [1, 3],
            "object_size": [10, 20],
        },
        "model": {
            "backbone_channels": [8, 8, 16, 16],
            "anchor_sizes": [12, 24],
            "rpn_pre_nms_top_n": 100,
            "rpn_post_nms_top_n": 16,
            "rpn_test_post_nms_top_n": 16,
            "rpn_batch_size": 32,
            "roi_hidden": 32,
            "roi_batch_size": 16,
            "img_head_hidden": 16,
            "obj_head_hidden": 16,
            "da_proposals": 4,
        },
        "train": {"iters_stage1": 2, "iters_stage2": 1, "checkpoint_every": 0, "log_every": 0},
    }
    path = tmp_path / "run.json"
    path.write_text(json.dumps(raw), encoding="utf-8")
    return path


def read_rows(path):
    with path.open(newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


class TestArguments:
    def test_help(self, capsys):
        assert dispatch(["--help"]) == 0
        assert "synth-dataset" in capsys.readouterr().out

    def test_unknown_flag(self, capsys):
        assert dispatch(["eval", "--checkpoint", "c.pt", "--manifest", "m.json", "--bogus"]) == 1
        assert "--bogus" in capsys.readouterr().err

    def test_train_needs_config(self, capsys):
        assert dispatch(["train"]) == 1
        assert "--config" in capsys.readouterr().err

    def test_missing_config_file(self, tmp_path, capsys):
        assert dispatch(["train", "--config", str(tmp_path / "none.json")]) == 1
        assert "none.json" in capsys.readouterr().err

    def test_unknown_config_key(self, config_file, capsys):
        assert dispatch(["train", "--config", str(config_file), "--set", "train.gama=1"]) == 1
        assert "train.gama" in capsys.readouterr().err

    def test_missing_checkpoint(self, tmp_path, capsys):
        code = dispatch(["eval", "--checkpoint", str(tmp_path / "c.pt"),
                         "--manifest", str(tmp_path / "m.json")])
        assert code == 1

    def test_bad_level(self, tmp_path):
        code = dispatch(["synth-dataset", "--fog-level", "huge", "--out-dir", str(tmp_path)])
        assert code == 1


class TestPipeline:
    def test_synth_train_eval_diagnose(self, tmp_path, config_file, capsys):
        data = tmp_path / "data"
        runs = tmp_path / "runs"
        assert dispatch(["synth-dataset", "--config", str(config_file), "--seed", "1"]) == 0
        assert (data / "train.json").exists()
        assert (data / "val-small.json").exists()

        assert dispatch(["train", "--config", str(config_file), "--mode", "advgrl",
                         "--out-dir", str(runs)]) == 0
        run_dir = runs / "advgrl-s0"
        checkpoint = run_dir / "checkpoint.pt"
        assert checkpoint.exists()
        assert len(read_rows(run_dir / "metrics.csv")) == 3
        snapshot = json.loads((run_dir / "config.json").read_text(encoding="utf-8"))
        assert snapshot["preset"] == "advgrl"

        table = tmp_path / "map.csv"
        assert dispatch(["eval", "--checkpoint", str(checkpoint),
                         "--manifest", str(data / "val-large.json"),
                         "--levels", "small,large", "--out", str(table)]) == 0
        assert [row["level"] for row in read_rows(table)] == ["small", "large", "clear"]
        assert "EVALUATION" in capsys.readouterr().out

        hardness, distances = tmp_path / "h.csv", tmp_path / "d.csv"
        assert dispatch(["diagnose", "--checkpoint", str(checkpoint),
                         "--manifest", str(data / "val-large.json"),
                         "--out", f"{hardness},{distances}",
                         "--render", str(tmp_path / "vis")]) == 0
        ranks = read_rows(hardness)
        assert f"Hardest:         {ranks[0]['sample_id']}" in capsys.readouterr().out
        assert sorted(p.stem for p in (tmp_path / "vis").glob("*.png")) == sorted(
            r["sample_id"] for r in ranks
        )
        assert [int(r["rank"]) for r in ranks] == [1, 2]
        assert float(ranks[0]["ah"]) <= float(ranks[1]["ah"])
        assert len(read_rows(distances)) == 2
        assert len(read_rows(tmp_path / "projection.csv")) == 6

    def test_resume_after_finish_keeps_metrics(self, tmp_path, config_file):
        runs = tmp_path / "runs"
        assert dispatch(["synth-dataset", "--config", str(config_file)]) == 0
        args = ["train", "--config", str(config_file), "--out-dir", str(runs), "--seed", "2"]
        assert dispatch(args) == 0
        metrics = runs / "full-s2" / "metrics.csv"
        before = metrics.read_text()
        assert dispatch([*args, "--resume"]) == 0
        assert metrics.read_text() == before

    def test_ablate(self, tmp_path, config_file, capsys):
        runs = tmp_path / "runs"
        assert dispatch(["synth-dataset", "--config", str(config_file)]) == 0
        assert dispatch(["ablate", "--config", str(config_file), "--out-dir", str(runs),
                         "--modes", "source-only,baseline-grl", "--seeds", "2"]) == 0
        rows = read_rows(runs / "ablation.csv")
        assert [(r["mode"], r["seed"]) for r in rows] == [
            ("source-only", "0"), ("source-only", "1"), ("baseline", "0"), ("baseline", "1"),
        ]
        assert all(0.0 <= float(r["mAP"]) <= 1.0 for r in rows)
        assert (runs / "baseline-s1" / "checkpoint.pt").exists()
        assert "ABLATION SUMMARY" in capsys.readouterr().out

    def test_ablate_unknown_mode(self, tmp_path, config_file):
        assert dispatch(["ablate", "--config", str(config_file), "--modes", "magic"]) == 1

    @pytest.mark.slow
    def test_full_ablation_grid(self, tmp_path, config_file):
        runs = tmp_path / "runs"
        assert dispatch(["synth-dataset", "--config", str(config_file)]) == 0
        assert dispatch(["ablate", "--config", str(config_file), "--out-dir", str(runs),
                         "--seeds", "3"]) == 0
        assert len(read_rows(runs / "ablation.csv")) == 15
