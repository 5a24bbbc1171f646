import json

import pytest

from planttrack.cli import main
from planttrack.config import config_from_dict, load_config
from planttrack.errors import ValidationError

TINY = {
    "name": "tiny",
    "seed": 3,
    "gen": {"channels": 8},
    "train": {"stages": 2, "hidden": 4, "epochs": 3},
    "track": {"reprompt_every": 2},
    "experiment": {"train_count": 4, "test_count": 2, "sequence_frames": 4},
}


@pytest.fixture()
def tiny_config(tmp_path):
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(TINY))
    return path


def test_config_defaults_and_nesting():
    cfg = config_from_dict(TINY)
    assert cfg.gen.channels == 8 and cfg.gen.sigma == 1.5
    assert cfg.train.optimizer.name == "adam"
    assert cfg.peak.threshold == 0.6
    assert config_from_dict(cfg.to_dict()) == cfg


@pytest.mark.parametrize("doc", [{"bogus": 1}, {"train": {"epochs": 2, "lr": 0.1}}, {"gen": 5}])
def test_config_rejects_unknown_or_malformed(doc):
    with pytest.raises(ValidationError):
        config_from_dict(doc)


def test_shipped_configs_load():
    for name in ("acceptance", "quick"):
        load_config(f"configs/{name}.json")


def test_usage_error_exit_code(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["train", "--no-such-flag"])
    assert exc.value.code == 1


def test_missing_input_is_data_error(tmp_path, tiny_config):
    assert main(["train", "--data", str(tmp_path / "nowhere"), "--config", str(tiny_config), "--out", str(tmp_path / "m")]) == 2


def test_unknown_config_key_is_data_error(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text('{"trian": {}}')
    assert main(["gen-data", "--config", str(bad), "--out", str(tmp_path / "d")]) == 2


def test_divergence_exit_code(tmp_path, tiny_config):
    doc = dict(TINY, train={"stages": 1, "hidden": 4, "epochs": 30, "optimizer": {"name": "sgd", "lr": 1e6}})
    cfg = tmp_path / "diverge.json"
    cfg.write_text(json.dumps(doc))
    assert main(["gen-data", "--config", str(cfg), "--out", str(tmp_path / "d"), "--count", "4"]) == 0
    with pytest.warns(RuntimeWarning):
        code = main(["train", "--data", str(tmp_path / "d"), "--config", str(cfg), "--out", str(tmp_path / "m")])
    assert code == 3


def test_pipeline_subcommands(tmp_path, tiny_config):
    cfg = str(tiny_config)
    data, model = tmp_path / "data", tmp_path / "model"
    assert main(["gen-data", "--config", cfg, "--out", str(data), "--count", "4", "--seed", "1"]) == 0
    assert (data / "manifest.json").exists() and (data / "sample_003" / "features.pttn").exists()

    assert main(["train", "--data", str(data), "--config", cfg, "--out", str(model)]) == 0
    assert (model / "model.json").exists() and (model / "loss_curve.csv").exists()

    preds = tmp_path / "preds"
    preds.mkdir()
    for i in range(4):
        sdir = data / f"sample_{i:03d}"
        args = ["detect", "--model", str(model), "--features", str(sdir / "features.pttn"),
                "--depth", str(sdir / "depth.pttn"), "--out", str(preds / f"sample_{i:03d}.csv")]
        assert main(args) == 0
    assert (preds / "sample_000.csv").read_text().startswith("class,cell_x,cell_y,pixel_x,pixel_y,score\n")

    scores = tmp_path / "scores.json"
    assert main(["eval", "--pred", str(preds), "--gt", str(data), "--out", str(scores)]) == 0
    doc = json.loads(scores.read_text())
    assert doc["match_radius"] == 1 and "per_class" in doc

    tracks = tmp_path / "tracks.csv"
    assert main(["track", "--model", str(model), "--frames", str(data), "--config", cfg,
                 "--reprompt-every", "2", "--out", str(tracks)]) == 0
    assert tracks.read_text().startswith("id,class,frame,cell_x,cell_y,visible\n")


def test_run_experiment_subcommand(tmp_path, tiny_config, capsys):
    out = tmp_path / "run"
    assert main(["run-experiment", "--config", str(tiny_config), "--out", str(out)]) == 0
    report = capsys.readouterr().out
    assert report.startswith("experiment: tiny (seed 3)")
    metrics = json.loads((out / "metrics.json").read_text())
    assert set(metrics) == {"name", "seed", "training", "detection", "tracking"}
    assert set(metrics["tracking"]) == {"configured", "no_reprompt"}
    for rel in ("config.json", "loss_curve.csv", "model/model.json", "data/train/manifest.json",
                "data/test_b/manifest.json", "detections/a/sample_000.csv", "tracking/tracks.csv",
                "sequence/frame_003/features.pttn", "report.txt"):
        assert (out / rel).exists(), rel
