import csv
import json
import math

import numpy as np
import pytest

from jamfed.cli import main
from jamfed.dataset import ClientPartition, DatasetManifest
from jamfed.errors import ConfigError
from jamfed.experiment import load_config, resolve_config, run_experiment
from jamfed.nn import load_checkpoint
from jamfed.signals import read_iq
from jamfed.spectrogram import read_pgm_array

TINY = {
    "master_seed": 5,
    "synth": {"sample_rate_hz": 1e6, "num_samples": 4096},
    "dataset": {"per_class_train": 4, "per_class_test": 2},
    "partition": {"num_clients": 2},
    "training": {"rounds": 2, "batch_size": 8},
    "link": {"events_per_zone": 50},
}


@pytest.fixture(scope="module")
def tiny_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    assert main(["dataset", "gen", "--per-class-train", "3", "--per-class-test", "2", "--size", "64",
                 "--fs", "1e6", "--samples", "4096", "--seed", "1", "--out", str(root)]) == 0
    return root


def test_synth_and_spectrogram(tmp_path, capsys):
    iq = tmp_path / "c.iq"
    assert main(["synth", "--kind", "chirp", "--fs", "1e6", "--samples", "8192", "--seed", "3",
                 "--f-min=-2e5", "--f-max=2e5", "--sweep-period", "4e-3", "--out", str(iq)]) == 0
    series = read_iq(iq)
    assert series.grid.num_samples == 8192 and series.grid.sample_rate_hz == 1e6
    pgm = tmp_path / "c.pgm"
    assert main(["spectrogram", "--in", str(iq), "--out", str(pgm), "--size", "224"]) == 0
    px = read_pgm_array(pgm)
    assert px.shape == (224, 224) and set(np.unique(px)) <= {0, 255}


@pytest.mark.parametrize("kind", ["am", "fm", "dme", "nb", "none"])
def test_synth_kinds(tmp_path, kind):
    iq = tmp_path / "x.iq"
    assert main(["synth", "--kind", kind, "--fs", "1e6", "--samples", "1024", "--out", str(iq)]) == 0
    assert read_iq(iq).grid.num_samples == 1024


def test_synth_aliasing_exits_nonzero(tmp_path, capsys):
    code = main(["synth", "--kind", "am", "--fs", "1e3", "--samples", "64", "--freq", "600",
                 "--out", str(tmp_path / "x.iq")])
    assert code != 0
    assert "Nyquist" in capsys.readouterr().err


def test_dataset_partition_train_eval(tiny_data, tmp_path, capsys):
    manifest = DatasetManifest.load(tiny_data / "train.jsonl")
    assert len(manifest) == 18
    part = tmp_path / "p.json"
    assert main(["partition", "--manifest", str(tiny_data / "train.jsonl"), "--clients", "3",
                 "--mode", "dirichlet", "--beta", "0.5", "--seed", "2", "--out", str(part)]) == 0
    ClientPartition.load(part)
    metrics, ckpt = tmp_path / "m.csv", tmp_path / "m.ckpt"
    assert main(["train", "--mode", "fedavg", "--partition", str(part), "--rounds", "2",
                 "--train", str(tiny_data / "train.jsonl"), "--test", str(tiny_data / "test.jsonl"),
                 "--metrics", str(metrics), "--checkpoint", str(ckpt), "--seed", "4"]) == 0
    rows = list(csv.DictReader(metrics.open()))
    assert [r["round"] for r in rows] == ["1", "2"]
    assert list(load_checkpoint(ckpt)) == ["conv.weight", "conv.bias", "dense.weight", "dense.bias"]
    per_kind = tmp_path / "k.csv"
    assert main(["eval", "--checkpoint", str(ckpt), "--test", str(tiny_data / "test.jsonl"),
                 "--out", str(per_kind)]) == 0
    assert "accuracy" in capsys.readouterr().out
    kinds = [r["kind"] for r in csv.DictReader(per_kind.open())]
    assert kinds == ["AM", "Chirp", "FM", "DME", "NB", "No"]

    timeline = tmp_path / "t.csv"
    assert main(["cn0", "timeline", "--accuracy-csv", str(per_kind), "--events", "40", "--seed", "1",
                 "--out", str(timeline)]) == 0
    assert len(timeline.read_text().splitlines()) == 41


def test_train_solo_and_warm_start(tiny_data, tmp_path):
    part = tmp_path / "p.json"
    assert main(["partition", "--manifest", str(tiny_data / "train.jsonl"), "--clients", "2",
                 "--mode", "iid", "--out", str(part)]) == 0
    src = tmp_path / "src.ckpt"
    common = ["--train", str(tiny_data / "train.jsonl"), "--test", str(tiny_data / "test.jsonl"), "--rounds", "1"]
    assert main(["train", "--mode", "solo", "--client", "1", "--partition", str(part),
                 "--checkpoint", str(src)] + common) == 0
    assert main(["train", "--mode", "central", "--warm-start", str(src), "--reinit", "dense",
                 "--precision", "f32", "--checkpoint", str(tmp_path / "w.ckpt")] + common) == 0
    assert load_checkpoint(tmp_path / "w.ckpt")["conv.weight"].dtype == np.float32
    assert main(["train", "--mode", "solo"] + common) != 0


def test_cn0_commands(capsys):
    assert main(["cn0", "--eta", "0.94", "--clean", "48", "--jammed", "40"]) == 0
    assert capsys.readouterr().out.strip() == "47.5200"
    assert main(["cn0", "--snr", "10", "--bandwidth", "2e6"]) == 0
    assert capsys.readouterr().out.strip() == "73.0103"
    assert main(["cn0", "--eta", "1.5"]) != 0
    assert main(["cn0", "--clean", "30", "--jammed", "40", "--eta", "0.5"]) != 0


def test_plot_command(tmp_path, capsys):
    csv_path = tmp_path / "central.csv"
    csv_path.write_text("round,test_accuracy,mean_train_loss,wall_ms\n1,0.5,1.2,0.0\n2,0.75,0.8,0.0\n")
    out = tmp_path / "acc.svg"
    assert main(["plot", "--kind", "accuracy_curve", "--out", str(out), str(csv_path)]) == 0
    assert out.exists()
    bad = tmp_path / "bad.csv"
    bad.write_text("round,test_accuracy\n1,x\n")
    assert main(["plot", "--kind", "accuracy_curve", "--out", str(out), str(bad)]) != 0
    assert "bad.csv:2" in capsys.readouterr().err


def test_config_validation_paths():
    with pytest.raises(ConfigError) as err:
        resolve_config({"training": {"rounds": 0}})
    assert err.value.path == "training.rounds"
    with pytest.raises(ConfigError) as err:
        resolve_config({"training": {"epochs": 3}})
    assert err.value.path == "training.epochs"
    with pytest.raises(ConfigError) as err:
        resolve_config({"image": {"size": 100}})
    assert err.value.path == "image.size"
    cfg = load_config("paper-desk")
    assert cfg["partition"]["seed"] == cfg["master_seed"]
    assert cfg["training"]["rounds"] == 40 and cfg["image"]["size"] == 64


def test_run_rejects_bad_config(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text(json.dumps({"training": {"rounds": 0}}))
    assert main(["run", "--config", str(bad), "--out", str(tmp_path / "o")]) != 0
    assert "training.rounds" in capsys.readouterr().err
    broken = tmp_path / "broken.cfg"
    broken.write_text("{")
    assert main(["run", "--config", str(broken), "--out", str(tmp_path / "o")]) != 0


def test_run_experiment_end_to_end(tmp_path, monkeypatch):
    monkeypatch.setenv("JAMFED_OUT", str(tmp_path / "root"))
    cfg = dict(TINY, out_dir="tiny")
    summary = run_experiment(cfg)
    out = tmp_path / "root" / "tiny"
    assert not (out / "INCOMPLETE").exists()
    echoed = json.loads((out / "config.json").read_text())
    assert echoed["training"]["lr"] == 0.01 and echoed["master_seed"] == 5
    for regime in ("central", "fedavg_iid", "fedavg_dirichlet", "solo"):
        assert (out / "metrics" / f"{regime}.csv").exists()
        assert (out / "checkpoints" / f"{regime}.ckpt").exists()
        assert (out / "reports" / f"cn0_{regime}.csv").exists()
        assert 0.0 <= summary["final_accuracy"][regime] <= 1.0
        assert 40.0 <= summary["cn0"][regime] <= 48.0
    for fig in ("accuracy.svg", "cn0.svg", "partition_dirichlet.svg"):
        assert (out / "figures" / fig).exists()
    assert set(summary["solo"]) == {"client", "classes", "own_class_accuracy"}
    assert all(p.resolve().is_relative_to(out.resolve()) for p in out.rglob("*"))

    with pytest.raises(Exception, match="--force"):
        run_experiment(cfg)
    fp = (out / "dataset" / "fingerprint.txt").read_text()
    again = run_experiment(cfg, force=True)
    assert again == summary
    assert (out / "dataset" / "fingerprint.txt").read_text() == fp


def test_run_command_with_overrides(tmp_path, capsys):
    cfg_path = tmp_path / "tiny.cfg"
    cfg_path.write_text(json.dumps(dict(TINY, regimes=["central"], training={"rounds": 1})))
    out = tmp_path / "run"
    assert main(["run", "--config", str(cfg_path), "--out", str(out), "--seed", "9", "--precision", "f32"]) == 0
    echoed = json.loads((out / "config.json").read_text())
    assert echoed["master_seed"] == 9 and echoed["precision"] == "f32"
    assert echoed["partition"]["seed"] == 9
    assert json.loads(capsys.readouterr().out)["final_accuracy"]["central"] >= 0.0
    assert main(["run", "--config", str(cfg_path), "--out", str(out)]) != 0


def test_run_experiment_warm_start_study(tmp_path):
    cfg = dict(TINY, regimes=["central"],
               warm_start={"enabled": True, "seeds": [1, 2], "pretrain_rounds": 1, "max_rounds": 2, "threshold": 0.3})
    summary = run_experiment(cfg, tmp_path / "ws")
    rows = list(csv.DictReader((tmp_path / "ws" / "reports" / "warm_start.csv").open()))
    assert [r["seed"] for r in rows] == ["1", "2"]
    assert [r["seed"] for r in summary["warm_start"]] == [1, 2]
    for r in summary["warm_start"]:
        assert r["rounds_warm"] == math.inf or 0 <= r["rounds_warm"] <= 2


@pytest.mark.parametrize("patch, path", [
    ({"seeds": []}, "warm_start.seeds"),
    ({"pretrain_labels": ["XX"]}, "warm_start.pretrain_labels"),
    ({"reinit": ["pool"]}, "warm_start.reinit"),
    ({"threshold": 1.5}, "warm_start.threshold"),
    ({"enabled": "yes"}, "warm_start.enabled"),
])
def test_warm_start_config_validation(patch, path):
    with pytest.raises(ConfigError) as err:
        resolve_config({"warm_start": patch})
    assert err.value.path == path
