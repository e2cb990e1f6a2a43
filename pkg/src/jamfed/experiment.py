"""
End-to-end experiment: dataset -> partitions -> training regimes -> C/N0 reports.

A run is described by one JSON document. Missing fields take defaults and the
fully materialised document is written to ``<out>/config.json`` so every run
directory is self-describing.
"""

from __future__ import annotations

import copy
import csv
import hashlib
import json
import logging
import math
import os
import shutil
from dataclasses import replace
from importlib import resources
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .dataset import (
    ClientPartition,
    DatasetManifest,
    ImageConfig,
    SynthConfig,
    dirichlet_partition,
    generate_dataset,
    iid_partition,
)
from .errors import ConfigError, JamfedError
from .fed import (
    FedConfig,
    Shard,
    WarmStartSpec,
    run_centralized,
    run_fedavg,
    run_solo,
    two_class_client,
    warm_start,
    write_metrics_csv,
)
from .link import JAMMER_LABELS, LinkBudget, random_schedule, zone_timeline
from .nn import LAYERS, CnnSpec, OptimizerConfig, per_class_accuracy, save_checkpoint
from .plotting import accuracy_curve, cn0_bars, partition_bars
from .spectrogram import CLASS_LABELS, IMAGE_SIZES, StftConfig

log = logging.getLogger(__name__)

REGIMES = ("central", "fedavg_iid", "fedavg_dirichlet", "solo")
INCOMPLETE_MARKER = "INCOMPLETE"

DEFAULTS = {
    "master_seed": 0,
    "precision": "f64",
    "threads": 1,
    "out_dir": "runs/experiment",
    "record_wall_time": False,
    "synth": {
        "sample_rate_hz": 1e7,
        "num_samples": 16384,
        "jnr_db": [5.0, 15.0],
        "snr_db": -20.0,
        "noise_power_w": 1.0,
        "ranges": {},
    },
    "stft": {"window_len": 256, "hop": 64, "nfft": 256, "window_kind": "hann"},
    "image": {"size": 64, "binarize_pct": 85.0},
    "dataset": {"per_class_train": 200, "per_class_test": 60, "workers": 1},
    "partition": {"num_clients": 5, "beta": 0.1, "seed": None},
    "training": {"rounds": 40, "local_epochs": 1, "batch_size": 32, "optimizer": "sgd", "lr": 0.01},
    "regimes": list(REGIMES),
    "solo": {"client": None, "num_classes": 2},
    "warm_start": {
        "enabled": False,
        "seeds": [1, 2, 3],
        "pretrain_labels": ["AM", "Chirp", "FM", "DME"],
        "pretrain_rounds": 10,
        "reinit": ["dense"],
        "threshold": 0.85,
        "max_rounds": 40,
    },
    "link": {
        "clean_cn0_dbhz": 48.0,
        "jammed_cn0_dbhz": 40.0,
        "bandwidth_hz": 2e6,
        "events_per_zone": 1000,
        "mixing": "db",
    },
}


def _merge(defaults: dict, given: dict, path: str = "") -> dict:
    out = copy.deepcopy(defaults)
    for key, value in given.items():
        where = f"{path}.{key}" if path else key
        if key not in defaults:
            raise ConfigError(where, "unknown field")
        if isinstance(defaults[key], dict) and key != "ranges":
            if not isinstance(value, dict):
                raise ConfigError(where, "expected an object")
            out[key] = _merge(defaults[key], value, where)
        else:
            out[key] = value
    return out


def _num(cfg: dict, path: str, *, integer=False, minimum=None, exclusive=False, allow_none=False):
    node = cfg
    for part in path.split("."):
        node = node[part]
    if node is None and allow_none:
        return
    ok_type = isinstance(node, int) if integer else isinstance(node, (int, float))
    if isinstance(node, bool) or not ok_type:
        raise ConfigError(path, f"expected {'an integer' if integer else 'a number'}, got {node!r}")
    if minimum is not None and (node <= minimum if exclusive else node < minimum):
        raise ConfigError(path, f"must be {'>' if exclusive else '>='} {minimum}, got {node}")


def resolve_config(raw: dict) -> dict:
    """Merge ``raw`` over the defaults and validate every field."""
    if not isinstance(raw, dict):
        raise ConfigError("<root>", "configuration must be a JSON object")
    cfg = _merge(DEFAULTS, raw)
    _num(cfg, "master_seed", integer=True, minimum=0)
    if cfg["precision"] not in ("f32", "f64"):
        raise ConfigError("precision", f"must be 'f32' or 'f64', got {cfg['precision']!r}")
    _num(cfg, "threads", integer=True, minimum=1)
    _num(cfg, "synth.sample_rate_hz", minimum=0, exclusive=True)
    _num(cfg, "synth.num_samples", integer=True, minimum=cfg["stft"]["window_len"] + cfg["stft"]["hop"])
    _num(cfg, "synth.noise_power_w", minimum=0, exclusive=True)
    jnr = cfg["synth"]["jnr_db"]
    if not (isinstance(jnr, list) and len(jnr) == 2 and jnr[0] <= jnr[1]):
        raise ConfigError("synth.jnr_db", "expected [low, high] with low <= high")
    for name in ("window_len", "hop", "nfft"):
        _num(cfg, f"stft.{name}", integer=True, minimum=1)
    try:
        StftConfig(**cfg["stft"])
    except JamfedError as exc:
        raise ConfigError("stft", str(exc)) from None
    if cfg["image"]["size"] not in IMAGE_SIZES:
        raise ConfigError("image.size", f"must be one of {IMAGE_SIZES}")
    _num(cfg, "image.binarize_pct", minimum=0)
    if cfg["image"]["binarize_pct"] > 100:
        raise ConfigError("image.binarize_pct", "must be <= 100")
    _num(cfg, "dataset.per_class_train", integer=True, minimum=1)
    _num(cfg, "dataset.per_class_test", integer=True, minimum=1)
    _num(cfg, "dataset.workers", integer=True, minimum=1)
    _num(cfg, "partition.num_clients", integer=True, minimum=1)
    _num(cfg, "partition.beta", minimum=0, exclusive=True)
    _num(cfg, "partition.seed", integer=True, minimum=0, allow_none=True)
    _num(cfg, "training.rounds", integer=True, minimum=1)
    _num(cfg, "training.local_epochs", integer=True, minimum=1)
    _num(cfg, "training.batch_size", integer=True, minimum=0, allow_none=True)
    _num(cfg, "training.lr", minimum=0)
    if cfg["training"]["optimizer"] not in ("sgd", "adam"):
        raise ConfigError("training.optimizer", "must be 'sgd' or 'adam'")
    bad = [r for r in cfg["regimes"] if r not in REGIMES]
    if bad or not cfg["regimes"]:
        raise ConfigError("regimes", f"expected a non-empty subset of {list(REGIMES)}, got {cfg['regimes']}")
    _num(cfg, "solo.client", integer=True, minimum=0, allow_none=True)
    _num(cfg, "solo.num_classes", integer=True, minimum=1)
    ws = cfg["warm_start"]
    if not isinstance(ws["enabled"], bool):
        raise ConfigError("warm_start.enabled", "expected true or false")
    if not ws["seeds"] or not all(isinstance(x, int) and not isinstance(x, bool) and x >= 0 for x in ws["seeds"]):
        raise ConfigError("warm_start.seeds", "expected a non-empty list of non-negative integers")
    bad = [lab for lab in ws["pretrain_labels"] if lab not in CLASS_LABELS]
    if bad or not ws["pretrain_labels"]:
        raise ConfigError("warm_start.pretrain_labels", f"expected labels from {list(CLASS_LABELS)}")
    if any(layer not in LAYERS for layer in ws["reinit"]):
        raise ConfigError("warm_start.reinit", f"expected layers from {list(LAYERS)}")
    _num(cfg, "warm_start.pretrain_rounds", integer=True, minimum=1)
    _num(cfg, "warm_start.max_rounds", integer=True, minimum=1)
    _num(cfg, "warm_start.threshold", minimum=0)
    if ws["threshold"] > 1:
        raise ConfigError("warm_start.threshold", "must be <= 1")
    _num(cfg, "link.bandwidth_hz", minimum=0, exclusive=True)
    _num(cfg, "link.events_per_zone", integer=True, minimum=1)
    if cfg["link"]["clean_cn0_dbhz"] < cfg["link"]["jammed_cn0_dbhz"]:
        raise ConfigError("link.clean_cn0_dbhz", "must not be below link.jammed_cn0_dbhz")
    if cfg["link"]["mixing"] not in ("db", "linear"):
        raise ConfigError("link.mixing", "must be 'db' or 'linear'")
    if cfg["partition"]["seed"] is None:
        cfg["partition"]["seed"] = cfg["master_seed"]
    return cfg


def shipped_config_path(name: str) -> Path:
    """Path of a config bundled with the package, e.g. ``paper-desk``."""
    fname = name if name.endswith(".cfg") else f"{name}.cfg"
    return Path(str(resources.files("jamfed") / "configs" / fname))


def load_raw_config(source: Union[str, Path]) -> dict:
    """The unvalidated JSON document at a path or shipped config name."""
    path = Path(source)
    if not path.exists():
        shipped = shipped_config_path(str(source))
        if shipped.exists():
            path = shipped
        else:
            raise ConfigError("<file>", f"config {source} not found")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError("<file>", f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from None


def load_config(source: Union[str, Path, dict]) -> dict:
    if isinstance(source, dict):
        return resolve_config(source)
    return resolve_config(load_raw_config(source))


def resolve_out_dir(cfg: dict, override: Optional[Union[str, Path]] = None) -> Path:
    """``override`` wins; otherwise relative paths resolve against $JAMFED_OUT if set."""
    if override is not None:
        return Path(override)
    out = Path(cfg["out_dir"])
    root = os.environ.get("JAMFED_OUT")
    if root and not out.is_absolute():
        return Path(root) / out
    return out


def fed_config(cfg: dict) -> FedConfig:
    t = cfg["training"]
    return FedConfig(
        num_clients=cfg["partition"]["num_clients"],
        rounds=t["rounds"],
        local_epochs=t["local_epochs"],
        optimizer=OptimizerConfig(t["optimizer"], float(t["lr"])),
        batch_size=t["batch_size"],
        master_seed=cfg["master_seed"],
        precision=cfg["precision"],
        threads=cfg["threads"],
        record_wall_time=cfg["record_wall_time"],
    )


def _dataset_fingerprint(cfg: dict) -> str:
    key = {k: cfg[k] for k in ("master_seed", "synth", "stft", "image", "dataset")}
    key["dataset"] = {k: v for k, v in key["dataset"].items() if k != "workers"}
    return hashlib.sha256(json.dumps(key, sort_keys=True).encode()).hexdigest()


def prepare_dataset(cfg: dict, data_dir: Path):
    """Generate the dataset into ``data_dir`` unless a matching copy is already there."""
    stamp = data_dir / "fingerprint.txt"
    fp = _dataset_fingerprint(cfg)
    if stamp.exists() and stamp.read_text().strip() == fp and (data_dir / "train.jsonl").exists():
        log.info("reusing cached dataset in %s", data_dir)
        return DatasetManifest.load(data_dir / "train.jsonl"), DatasetManifest.load(data_dir / "test.jsonl")
    if data_dir.exists():
        shutil.rmtree(data_dir)
    data_dir.mkdir(parents=True)
    s = cfg["synth"]
    synth = SynthConfig(s["sample_rate_hz"], s["num_samples"], tuple(s["jnr_db"]), s["snr_db"], s["noise_power_w"], s["ranges"])
    train, test = generate_dataset(
        data_dir,
        cfg["dataset"]["per_class_train"],
        cfg["dataset"]["per_class_test"],
        synth,
        StftConfig(**cfg["stft"]),
        ImageConfig(**cfg["image"]),
        cfg["master_seed"],
        cfg["dataset"]["workers"],
    )
    stamp.write_text(fp + "\n")
    return train, test


def load_shard(manifest: DatasetManifest) -> Shard:
    images, labels = manifest.load_images()
    return Shard(images, labels)


def _write_rows(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _fmt(x) -> str:
    return "nan" if isinstance(x, float) and math.isnan(x) else repr(float(x))


def run_experiment(
    source: Union[str, Path, dict],
    out_dir: Optional[Union[str, Path]] = None,
    force: bool = False,
) -> dict:
    """Run every requested regime and write metrics, checkpoints, reports and figures.

    Returns a summary dict (also written to ``reports/summary.json``).
    """
    cfg = load_config(source)
    out = resolve_out_dir(cfg, out_dir)
    if (out / "config.json").exists() and not force:
        raise JamfedError(f"{out} already holds a run; pass force=True (--force) to overwrite")
    out.mkdir(parents=True, exist_ok=True)
    marker = out / INCOMPLETE_MARKER
    marker.write_text("run in progress or failed\n")
    (out / "config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")
    for sub in ("metrics", "checkpoints", "partitions", "reports", "figures"):
        (out / sub).mkdir(exist_ok=True)

    train_m, test_m = prepare_dataset(cfg, out / "dataset")
    train, test = load_shard(train_m), load_shard(test_m)
    spec = CnnSpec(cfg["image"]["size"])
    fcfg = fed_config(cfg)
    pcfg = cfg["partition"]
    regimes = cfg["regimes"]

    iid = iid_partition(train.labels, pcfg["num_clients"], pcfg["seed"])
    iid.save(out / "partitions" / "iid.json")
    dirich = dirichlet_partition(train.labels, pcfg["num_clients"], pcfg["beta"], pcfg["seed"])
    dirich.save(out / "partitions" / "dirichlet.json")
    partition_bars(dirich.class_matrix(train.labels), out / "figures" / "partition_dirichlet.svg")

    summary = {"final_accuracy": {}, "per_class_accuracy": {}}
    for regime in regimes:
        log.info("training %s", regime)
        if regime == "central":
            params, metrics = run_centralized(fcfg, train, test, spec)
        elif regime == "fedavg_iid":
            params, metrics = run_fedavg(fcfg, iid, train, test, spec)
        elif regime == "fedavg_dirichlet":
            params, metrics = run_fedavg(fcfg, dirich, train, test, spec)
        else:
            client, classes = _solo_choice(cfg, dirich, train.labels)
            params, metrics = run_solo(fcfg, dirich, client, train, test, spec, keep_classes=classes)
            sel = np.isin(test.labels, classes)
            own = float(np.mean(per_class_accuracy(params, test.images[sel], test.labels[sel])[classes]))
            summary["solo"] = {"client": client, "classes": [CLASS_LABELS[c] for c in classes], "own_class_accuracy": own}
        write_metrics_csv(out / "metrics" / f"{regime}.csv", metrics)
        save_checkpoint(out / "checkpoints" / f"{regime}.ckpt", params)
        summary["final_accuracy"][regime] = metrics[-1].test_accuracy
        pca = per_class_accuracy(params, test.images, test.labels)
        summary["per_class_accuracy"][regime] = {CLASS_LABELS[c]: float(pca[c]) for c in range(len(CLASS_LABELS))}

    _write_rows(
        out / "reports" / "per_class_accuracy.csv",
        ["regime", "label", "accuracy"],
        [[r, lab, _fmt(a)] for r in regimes for lab, a in summary["per_class_accuracy"][r].items()],
    )

    budget = LinkBudget(cfg["link"]["clean_cn0_dbhz"], cfg["link"]["jammed_cn0_dbhz"], cfg["link"]["bandwidth_hz"])
    summary["cn0"] = {}
    cn0_paths = []
    for regime in regimes:
        acc = {k: summary["per_class_accuracy"][regime][k] for k in JAMMER_LABELS}
        rows, means = [], []
        for zone in range(pcfg["num_clients"]):
            schedule = random_schedule(cfg["link"]["events_per_zone"], [cfg["master_seed"], zone, 1])
            report, _ = zone_timeline(acc, budget, schedule, [cfg["master_seed"], zone, 2], zone, cfg["link"]["mixing"])
            rows.append([zone, _fmt(report.eta), _fmt(report.expected_cn0_dbhz), _fmt(report.mean_event_cn0_dbhz),
                         _fmt(report.sum_event_cn0_dbhz), _fmt(report.detected_fraction)])
            means.append(report.mean_event_cn0_dbhz)
        path = out / "reports" / f"cn0_{regime}.csv"
        _write_rows(path, ["zone", "eta", "expected_cn0_dbhz", "mean_event_cn0_dbhz", "sum_event_cn0_dbhz", "detected_fraction"], rows)
        cn0_paths.append(path)
        summary["cn0"][regime] = float(np.mean(means))

    accuracy_curve([out / "metrics" / f"{r}.csv" for r in regimes], out / "figures" / "accuracy.svg")
    cn0_bars(cn0_paths, out / "figures" / "cn0.svg")

    if cfg["warm_start"]["enabled"]:
        log.info("warm-start study")
        rows = warm_start_study(cfg, train, test)
        _write_rows(
            out / "reports" / "warm_start.csv",
            ["seed", "rounds_warm", "rounds_cold"],
            [[r["seed"], _fmt(r["rounds_warm"]), _fmt(r["rounds_cold"])] for r in rows],
        )
        summary["warm_start"] = rows
    (out / "reports" / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    marker.unlink()
    return summary


def warm_start_study(cfg: dict, train: Shard, test: Shard) -> list:
    """Rounds to the accuracy threshold from a partial-class pretrain versus from scratch.

    For every seed: pretrain on ``pretrain_labels`` only, re-initialise the
    ``reinit`` layers and fine-tune on all classes; the cold baseline
    re-initialises every layer and otherwise trains identically (same batch
    order, same optimiser). Rounds are counted with round 0 = before training.
    """
    ws = cfg["warm_start"]
    spec = CnnSpec(cfg["image"]["size"])
    keep = [CLASS_LABELS.index(lab) for lab in ws["pretrain_labels"]]
    sub_train = train.subset(np.flatnonzero(np.isin(train.labels, keep)))
    sub_test = test.subset(np.flatnonzero(np.isin(test.labels, keep)))
    rows = []
    for seed in ws["seeds"]:
        base = fed_config(cfg)
        pre_cfg = replace(base, master_seed=int(seed), rounds=ws["pretrain_rounds"])
        source, _ = run_centralized(pre_cfg, sub_train, sub_test, spec)
        tune_cfg = replace(base, master_seed=int(seed), rounds=ws["max_rounds"])
        _, _, warm = warm_start(WarmStartSpec(source, tuple(ws["reinit"])), tune_cfg, train, test,
                                ws["threshold"], spec, stop_at_threshold=True)
        _, _, cold = warm_start(WarmStartSpec(source, LAYERS), tune_cfg, train, test,
                                ws["threshold"], spec, stop_at_threshold=True)
        log.info("seed %d: warm %s rounds, cold %s rounds", seed, warm, cold)
        rows.append({"seed": int(seed), "rounds_warm": warm, "rounds_cold": cold})
    return rows


def _solo_choice(cfg: dict, partition: ClientPartition, labels: np.ndarray):
    k = cfg["solo"]["num_classes"]
    if cfg["solo"]["client"] is None:
        return two_class_client(partition, labels, k)
    m = cfg["solo"]["client"]
    if m >= partition.num_clients:
        raise ConfigError("solo.client", f"client {m} out of range for {partition.num_clients} clients")
    counts = partition.class_matrix(labels)[m]
    return m, [int(c) for c in np.argsort(-counts, kind="stable")[:k] if counts[c] > 0]
