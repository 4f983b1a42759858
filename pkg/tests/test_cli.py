import filecmp
import json
import os

import pandas as pd
import pytest

import app
from config import StageConfig
from database import REGISTRY_URL_ENV, RunRegistry


@pytest.fixture
def cli(data_paths, monkeypatch):
    monkeypatch.delenv(REGISTRY_URL_ENV, raising=False)
    return data_paths


def _statuses(paths):
    return RunRegistry(paths.registry).get_runs()[["command", "status"]].values.tolist()


def test_unknown_flag_is_a_usage_error(cli):
    with pytest.raises(SystemExit) as exc:
        app.main(["sample", "a person jumps", "--bogus"])
    assert exc.value.code == 2


def test_gen_data(cli, capsys):
    assert app.main(["gen-data", "--n", "100", "--seed", "3"]) == 0
    assert "100 records" in capsys.readouterr().out
    assert len(pd.read_json(cli.split("val"), lines=True)) == 10
    assert os.path.exists(os.path.join(cli.runs, "run_00001.json"))
    assert _statuses(cli) == [["gen-data", "finished"]]


def test_small_corpus_is_a_config_error(cli):
    assert app.main(["gen-data", "--n", "50"]) == 2


def test_eval_without_evaluator(cli, capsys):
    assert app.main(["eval"]) == 2
    assert "train-evaluator" in capsys.readouterr().err
    assert _statuses(cli) == [["eval", "failed"]]


def test_unexpected_error_marks_the_run_failed(cli):
    os.remove(cli.vocab)
    with pytest.raises(FileNotFoundError):
        app.main(["train", "--stage", "0"])
    assert _statuses(cli) == [["train", "failed"]]


def test_stage_two_without_stage_one(cli):
    assert app.main(["train", "--stage", "2"]) == 2


def test_stage_mismatch_in_config_file(cli, tmp_path):
    path = str(tmp_path / "stage.json")
    StageConfig(stage=2, mixture={"T2M": 0.4, "M2T": 0.4, "PREDICT": 0.2}).save(path)
    assert app.main(["train", "--stage", "1", "--config", path]) == 2


def test_vae_report_without_vae(cli):
    assert app.main(["vae-report"]) == 2


def test_plot(cli, tmp_path):
    csv = tmp_path / "stage1.csv"
    pd.DataFrame({"step": [0, 1, 2], "loss": [3.0, 2.0, 1.5], "val_loss": [None, None, 1.8]}).to_csv(csv, index=False)
    assert app.main(["plot", str(csv)]) == 0
    assert (tmp_path / "stage1.svg").exists()
    assert app.main(["plot", str(tmp_path / "missing.csv")]) == 1


def test_train_sample_caption_predict(cli, tmp_path, vae_config, backbone_config, diffusion_config,
                                      evaluator_config, capsys):
    configs = {}
    for name, config in (("vae", vae_config), ("backbone", backbone_config), ("diffusion", diffusion_config)):
        configs[name] = str(tmp_path / f"{name}.json")
        config.save(configs[name])
    stage1 = str(tmp_path / "stage1.json")
    StageConfig(stage=1, batch_size=4, max_steps=2, eval_every=1, val_batches=1).save(stage1)

    assert app.main(["train-vae", "--config", configs["vae"]]) == 0
    assert app.main(["train", "--stage", "1", "--config", stage1, "--backbone-config", configs["backbone"],
                     "--diffusion-config", configs["diffusion"]]) == 0
    assert app.main(["vae-report", "--split", "test"]) == 0
    assert os.path.exists(cli.metrics_csv("vae_report_test"))

    clip_file = str(tmp_path / "jump.jsonl")
    assert app.main(["sample", "a person does a big jump forward", "--steps", "5", "--frames", "12",
                     "--seed", "7", "--out", clip_file]) == 0
    sample = pd.read_json(clip_file, lines=True)
    assert len(sample.loc[0, "motion"]) == 12
    again = str(tmp_path / "jump_again.jsonl")
    assert app.main(["sample", "a person does a big jump forward", "--steps", "5", "--frames", "12",
                     "--seed", "7", "--out", again]) == 0
    assert filecmp.cmp(clip_file, again, shallow=False)

    capsys.readouterr()
    assert app.main(["caption", clip_file]) == 0
    assert capsys.readouterr().out.startswith("sample: ")

    out = str(tmp_path / "next.jsonl")
    assert app.main(["predict", clip_file, "--steps", "5", "--out", out]) == 0
    predicted = pd.read_json(out, lines=True)
    assert predicted.loc[0, "id"] == "sample_continued"
    assert len(predicted.loc[0, "motion"]) == 16

    with open(os.path.join(cli.runs, "run_00002.json"), encoding="utf-8") as fh:
        assert json.load(fh)["config_paths"] == {"backbone_config": configs["backbone"], "config": stage1,
                                                 "diffusion_config": configs["diffusion"]}
