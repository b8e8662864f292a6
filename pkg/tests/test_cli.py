import csv
import json
import os

import numpy as np
import pytest

from motionmix.cli import main
from motionmix.data_io import load_predictions
from motionmix.model import PredictionModel

GEN_FLAGS = ["--template", "lane_follow", "--count", "8", "--sigma", "0.05",
             "--history-steps", "3", "--future-steps", "5", "--dt", "0.2",
             "--max-neighbors", "2", "--val-fraction", "0.25", "--seed", "0"]
TRAIN_FLAGS = ["--width", "8", "--depth", "1", "--heads", "1",
               "--modes-per-head", "2", "--modes", "2", "--road-segments", "4",
               "--steps", "3", "--batch", "4", "--lr", "0.001",
               "--bag-prob", "1.0", "--seed", "0"]


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """Full tiny generate -> train -> predict -> aggregate -> eval run."""
    root = tmp_path_factory.mktemp("pipeline")
    data = str(root / "data")
    ckpt = str(root / "model.ckpt")
    preds = str(root / "preds.json")
    agg = str(root / "agg.json")
    report = str(root / "report.json")
    cases = str(root / "cases.csv")
    assert main(["generate", "--out", data] + GEN_FLAGS) == 0
    assert main(["train", "--data", data, "--out", ckpt] + TRAIN_FLAGS) == 0
    assert main(["predict", "--checkpoint", ckpt, "--data", data,
                 "--split", "val", "--out", preds, "--seed", "0"]) == 0
    assert main(["aggregate", "--predictions", preds, "--out", agg,
                 "--modes", "2", "--seed", "0"]) == 0
    assert main(["eval", "--predictions", agg, "--data", data,
                 "--split", "val", "--report", report, "--csv", cases,
                 "--k", "2", "--seed", "0"]) == 0
    return {"root": root, "data": data, "ckpt": ckpt, "preds": preds,
            "agg": agg, "report": report, "cases": cases}


class TestPipeline:
    def test_artifacts_exist(self, pipeline):
        for key in ("ckpt", "preds", "agg", "report", "cases"):
            assert os.path.exists(pipeline[key])
        assert os.path.exists(pipeline["ckpt"] + ".loss.csv")

    def test_report_contents(self, pipeline):
        rep = json.loads(open(pipeline["report"]).read())
        for key in ("min_ade", "min_de", "mr_simple", "map", "tri_c", "counts"):
            assert key in rep
        assert rep["k"] == 2
        assert rep["counts"]["total"] == 2  # val split of 8 at 0.25

    def test_loss_csv_rows(self, pipeline):
        with open(pipeline["ckpt"] + ".loss.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 3
        assert float(rows[0]["loss"]) > 0

    def test_predictions_shape(self, pipeline):
        entries = load_predictions(pipeline["preds"])
        assert len(entries) == 2
        assert len(entries[0]["heads"]) == 1
        agg_entries = load_predictions(pipeline["agg"])
        assert "prediction" in agg_entries[0]

    def test_predict_deterministic_bytes(self, pipeline):
        out2 = str(pipeline["root"] / "preds2.json")
        assert main(["predict", "--checkpoint", pipeline["ckpt"], "--data",
                     pipeline["data"], "--split", "val", "--out", out2,
                     "--seed", "0"]) == 0
        assert open(out2, "rb").read() == open(pipeline["preds"], "rb").read()

    def test_predict_jobs_match_serial(self, pipeline):
        out2 = str(pipeline["root"] / "preds_jobs.json")
        assert main(["predict", "--checkpoint", pipeline["ckpt"], "--data",
                     pipeline["data"], "--split", "val", "--out", out2,
                     "--jobs", "2", "--seed", "0"]) == 0
        assert open(out2, "rb").read() == open(pipeline["preds"], "rb").read()

    def test_eval_pure_function_of_inputs(self, pipeline):
        rep2 = str(pipeline["root"] / "report2.json")
        assert main(["eval", "--predictions", pipeline["agg"], "--data",
                     pipeline["data"], "--split", "val", "--report", rep2,
                     "--k", "2", "--seed", "0"]) == 0
        assert open(rep2, "rb").read() == open(pipeline["report"], "rb").read()


class TestExitCodes:
    def test_validation_error_is_2(self, pipeline):
        # head count disagrees with the checkpoint
        code = main(["predict", "--checkpoint", pipeline["ckpt"], "--data",
                     pipeline["data"], "--out", "/tmp/never.json",
                     "--heads", "5"])
        assert code == 2

    def test_bad_mode_probs_is_2(self, tmp_path):
        code = main(["generate", "--out", str(tmp_path / "d"),
                     "--template", "t_junction", "--count", "2",
                     "--mode-probs", '{"left": 0.9, "right": 0.9}'])
        assert code == 2

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_numeric_error_is_3(self, pipeline, tmp_path):
        code = main(["train", "--data", pipeline["data"], "--out",
                     str(tmp_path / "m.ckpt"), "--width", "8", "--depth", "1",
                     "--heads", "1", "--modes-per-head", "2", "--modes", "2",
                     "--road-segments", "4", "--steps", "6", "--batch", "4",
                     "--lr", "1e14", "--bag-prob", "1.0", "--seed", "0"])
        assert code == 3

    def test_io_error_is_4(self):
        code = main(["train", "--data", "/nonexistent-dataset",
                     "--out", "/tmp/never.ckpt"])
        assert code == 4

    def test_unwritable_report_is_4(self, pipeline):
        code = main(["eval", "--predictions", pipeline["agg"], "--data",
                     pipeline["data"], "--report", "/no/such/dir/report.json",
                     "--k", "2"])
        assert code == 4


class TestConfigFile:
    def test_config_supplies_defaults(self, pipeline, tmp_path):
        cfg = tmp_path / "train.json"
        cfg.write_text(json.dumps({"width": 10, "steps": 2, "depth": 1,
                                   "modes_per_head": 2, "modes": 2,
                                   "road_segments": 4, "batch": 4,
                                   "lr": 0.001, "bag_prob": 1.0}))
        out = str(tmp_path / "m.ckpt")
        assert main(["train", "--data", pipeline["data"], "--out", out,
                     "--config", str(cfg), "--seed", "0"]) == 0
        model = PredictionModel.load(out)
        assert model.config.mcg_width == 10

    def test_explicit_flag_wins(self, pipeline, tmp_path):
        cfg = tmp_path / "train.json"
        cfg.write_text(json.dumps({"steps": 9, "width": 8, "depth": 1,
                                   "modes_per_head": 2, "modes": 2,
                                   "road_segments": 4, "batch": 4,
                                   "lr": 0.001, "bag_prob": 1.0}))
        out = str(tmp_path / "m.ckpt")
        assert main(["train", "--data", pipeline["data"], "--out", out,
                     "--config", str(cfg), "--steps", "2", "--seed", "0"]) == 0
        with open(out + ".loss.csv") as fh:
            assert len(list(csv.DictReader(fh))) == 2

    def test_unknown_key_rejected(self, pipeline, tmp_path):
        cfg = tmp_path / "bad.json"
        cfg.write_text(json.dumps({"layers": 4}))
        code = main(["train", "--data", pipeline["data"],
                     "--out", str(tmp_path / "m.ckpt"), "--config", str(cfg)])
        assert code == 2

    def test_malformed_config_rejected(self, pipeline, tmp_path):
        cfg = tmp_path / "bad.json"
        cfg.write_text("{oops")
        code = main(["train", "--data", pipeline["data"],
                     "--out", str(tmp_path / "m.ckpt"), "--config", str(cfg)])
        assert code == 2


class TestSeedEnv:
    def test_env_seed_fallback(self, tmp_path, monkeypatch):
        a = tmp_path / "a"
        b = tmp_path / "b"
        flags = ["--template", "lane_follow", "--count", "3", "--sigma", "0.05",
                 "--history-steps", "3", "--future-steps", "5",
                 "--max-neighbors", "1", "--val-fraction", "0.0"]
        monkeypatch.setenv("MOTIONMIX_SEED", "7")
        assert main(["generate", "--out", str(a)] + flags) == 0
        monkeypatch.delenv("MOTIONMIX_SEED")
        assert main(["generate", "--out", str(b)] + flags + ["--seed", "7"]) == 0
        for name in sorted(os.listdir(a / "train")):
            assert (a / "train" / name).read_bytes() == \
                (b / "train" / name).read_bytes()


class TestAblate:
    def test_anchor_preset_writes_table(self, pipeline, tmp_path):
        out = str(tmp_path / "table.csv")
        code = main(["ablate", "--preset", "anchors", "--data",
                     pipeline["data"], "--out", out, "--width", "8",
                     "--depth", "1", "--heads", "1", "--modes-per-head", "2",
                     "--modes", "2", "--road-segments", "4", "--steps", "2",
                     "--batch", "4", "--lr", "0.001", "--bag-prob", "1.0",
                     "--seed", "0"])
        assert code == 0
        with open(out) as fh:
            rows = list(csv.DictReader(fh))
        assert [r["variant"] for r in rows] == ["learned", "static_kmeans"]
        for r in rows:
            assert float(r["min_ade"]) >= 0.0
            assert r["preset"] == "anchors"

    def test_unknown_preset_rejected(self, pipeline, tmp_path):
        with pytest.raises(SystemExit):  # argparse choice check
            main(["ablate", "--preset", "bogus", "--data", pipeline["data"],
                  "--out", str(tmp_path / "t.csv")])
