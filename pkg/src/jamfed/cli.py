"""Command-line entry point: ``jamfed <subcommand> ...``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from contextlib import nullcontext


from . import dataset as ds
from .errors import JamfedError
from .experiment import load_raw_config, run_experiment
from .fed import (
    FedConfig,
    Shard,
    WarmStartSpec,
    load_warm_params,
    run_centralized,
    run_fedavg,
    run_solo,
    write_metrics_csv,
)
from .link import JAMMER_LABELS, LinkBudget, cn0_from_snr, expected_cn0, random_schedule, zone_timeline
from .nn import CnnSpec, OptimizerConfig, check_params, evaluate_accuracy, load_checkpoint, per_class_accuracy, save_checkpoint
from .plotting import emit_plot
from .signals import (
    AMParams,
    ChirpParams,
    DMEParams,
    FMParams,
    FMTone,
    NBParams,
    PulseTrain,
    ReceivedSignalSpec,
    SampleGrid,
    Tone,
    compose_received,
    read_iq,
    write_iq,
)
from .spectrogram import CLASS_LABELS, IMAGE_SIZES, StftConfig, render_image, resize, write_pgm

log = logging.getLogger("jamfed")


def _threads(n):
    if not n:
        return nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(n)


def _jammer_from_args(a, fs):
    if a.kind == "none":
        return None
    if a.kind == "am":
        return AMParams(tuple(Tone(1.0, f, a.phase) for f in a.freq))
    if a.kind == "chirp":
        start = a.f_min if a.direction > 0 else a.f_max
        return ChirpParams(1.0, start, a.f_min, a.f_max, a.sweep_period, a.direction, a.phase)
    if a.kind == "fm":
        return FMParams(tuple(FMTone(1.0, f, a.mod_index) for f in a.freq))
    if a.kind == "dme":
        return DMEParams(1.0, a.duty, tuple(PulseTrain(r, c) for r, c in zip(a.rep_freq, a.freq)))
    return NBParams(1.0, a.freq[0], a.mod_index, a.sigma, a.phase)


def cmd_synth(a):
    fs = a.fs
    grid = SampleGrid(fs, a.samples)
    if a.freq is None:
        a.freq = [0.01 * fs if a.kind == "fm" else 0.1 * fs]
    if a.rep_freq is None:
        a.rep_freq = [fs / 1000] * len(a.freq)
    if a.mod_index is None:
        a.mod_index = 0.2 * fs if a.kind == "nb" else 5.0
    if a.f_min is None:
        a.f_min, a.f_max = -0.3 * fs, 0.3 * fs
    if a.sweep_period is None:
        a.sweep_period = grid.duration_s / 4
    spec = ReceivedSignalSpec(_jammer_from_args(a, fs), a.jnr, a.snr, a.noise_power, a.seed)
    write_iq(a.out, compose_received(spec, grid))
    print(f"wrote {a.samples} samples ({spec.label}) to {a.out}")


def cmd_spectrogram(a):
    series = read_iq(a.inp)
    img = render_image(series, StftConfig(a.window_len, a.hop, a.nfft, a.window), 512, a.binarize_pct)
    if a.size != 512:
        img = resize(img, a.size)
    write_pgm(a.out, img)
    print(f"wrote {img.height}x{img.width} spectrogram to {a.out}")


def cmd_dataset_gen(a):
    train, test = ds.generate_dataset(
        a.out,
        a.per_class_train,
        a.per_class_test,
        ds.SynthConfig(a.fs, a.samples),
        StftConfig(),
        ds.ImageConfig(a.size, a.binarize_pct),
        a.seed,
        a.workers,
    )
    print(f"train: {len(train)} images, test: {len(test)} images under {a.out}")


def cmd_partition(a):
    manifest = ds.DatasetManifest.load(a.manifest)
    if a.mode == "iid":
        part = ds.iid_partition(manifest, a.clients, a.seed)
    else:
        part = ds.dirichlet_partition(manifest, a.clients, a.beta, a.seed)
    part.save(a.out)
    mat = part.class_matrix(manifest.labels)
    print("client " + " ".join(f"{c:>6}" for c in CLASS_LABELS))
    for m, row in enumerate(mat):
        print(f"{m:>6} " + " ".join(f"{v:>6}" for v in row))


def _load_shard(path) -> Shard:
    images, labels = ds.DatasetManifest.load(path).load_images()
    return Shard(images, labels)


def cmd_train(a):
    train, test = _load_shard(a.train), _load_shard(a.test)
    cfg = FedConfig(
        num_clients=1, rounds=a.rounds, local_epochs=a.local_epochs,
        optimizer=OptimizerConfig(a.optimizer, a.lr), batch_size=a.batch_size,
        master_seed=a.seed, precision=a.precision, threads=a.threads or 1,
        record_wall_time=a.wall_time,
    )
    spec = CnnSpec(train.images.shape[1])
    init = None
    if a.warm_start:
        init = load_warm_params(WarmStartSpec(a.warm_start, tuple(a.reinit)), spec, cfg)

    def report(m):
        print(f"round {m.round:4d}  acc {m.test_accuracy:.4f}  loss {m.mean_train_loss:.4f}", flush=True)

    if a.mode == "central":
        params, metrics = run_centralized(cfg, train, test, spec, init, report)
    else:
        if not a.partition:
            raise JamfedError(f"--partition is required for --mode {a.mode}")
        part = ds.ClientPartition.load(a.partition)
        if a.mode == "fedavg":
            params, metrics = run_fedavg(cfg, part, train, test, spec, init, report)
        else:
            if a.client is None:
                raise JamfedError("--client is required for --mode solo")
            params, metrics = run_solo(cfg, part, a.client, train, test, spec, init, report)
    if a.metrics:
        write_metrics_csv(a.metrics, metrics)
    if a.checkpoint:
        save_checkpoint(a.checkpoint, params)


def cmd_eval(a):
    params = load_checkpoint(a.checkpoint)
    shard = _load_shard(a.test)
    check_params(params, CnnSpec(shard.images.shape[1]))
    acc = evaluate_accuracy(params, shard.images, shard.labels)
    pca = per_class_accuracy(params, shard.images, shard.labels)
    print(f"accuracy {acc:.6f}")
    for lab, v in zip(CLASS_LABELS, pca):
        print(f"  {lab:<6}{v:.4f}")
    if a.out:
        with open(a.out, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["kind", "accuracy"])
            for lab, v in zip(CLASS_LABELS, pca):
                w.writerow([lab, repr(float(v))])


def _read_accuracy_csv(path):
    acc = {}
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.DictReader(fh), start=2):
            try:
                acc[row["kind"]] = float(row["accuracy"])
            except (KeyError, TypeError, ValueError):
                raise JamfedError(f"{path}:{lineno}: expected 'kind,accuracy' rows") from None
    return {k: v for k, v in acc.items() if k in JAMMER_LABELS}


def cmd_cn0(a):
    budget = LinkBudget(a.clean, a.jammed, a.bandwidth)
    if a.action == "timeline":
        if not a.accuracy_csv:
            raise JamfedError("--accuracy-csv is required for 'cn0 timeline'")
        acc = _read_accuracy_csv(a.accuracy_csv)
        schedule = random_schedule(a.events, [a.seed, 1], tuple(acc))
        report, series = zone_timeline(acc, budget, schedule, [a.seed, 2], 0, a.mixing)
        if a.out:
            with open(a.out, "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["time_s", "kind", "cn0_dbhz"])
                for (t, k), v in zip(schedule, series):
                    w.writerow([repr(t), k, repr(float(v))])
        print(f"eta {report.eta:.4f}  expected {report.expected_cn0_dbhz:.4f} dB-Hz  "
              f"mean {report.mean_event_cn0_dbhz:.4f} dB-Hz  sum {report.sum_event_cn0_dbhz:.2f} dB-Hz")
        return
    if a.snr is not None:
        print(f"{cn0_from_snr(a.snr, a.bandwidth):.4f}")
        return
    if a.eta is None:
        raise JamfedError("give --eta (expected C/N0) or --snr (SNR to C/N0)")
    print(f"{expected_cn0(a.eta, budget, a.mixing):.4f}")


def cmd_plot(a):
    path = emit_plot(a.csv, a.kind, a.out)
    print(f"wrote {path}")


def cmd_run(a):
    raw = load_raw_config(a.config)
    if a.seed is not None:
        raw["master_seed"] = a.seed
    if a.precision is not None:
        raw["precision"] = a.precision
    if a.threads:
        raw["threads"] = a.threads
    summary = run_experiment(raw, a.out, a.force)
    print(json.dumps(summary, indent=2, sort_keys=True))


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="master seed")
    common.add_argument("--threads", type=int, default=None, help="BLAS / client worker threads")
    common.add_argument("--precision", choices=("f32", "f64"), default=None)
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="jamfed", description=__doc__, parents=[common])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="synthesize a received-signal IQ file")
    s.add_argument("--kind", choices=("am", "chirp", "fm", "dme", "nb", "none"), required=True)
    s.add_argument("--fs", type=float, required=True)
    s.add_argument("--samples", type=int, required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--freq", type=float, action="append", help="tone / carrier / center frequency (repeatable)")
    s.add_argument("--phase", type=float, default=0.0)
    s.add_argument("--f-min", type=float)
    s.add_argument("--f-max", type=float)
    s.add_argument("--sweep-period", type=float)
    s.add_argument("--direction", type=int, choices=(1, -1), default=1)
    s.add_argument("--mod-index", type=float)
    s.add_argument("--duty", type=float, default=0.2)
    s.add_argument("--rep-freq", type=float, action="append")
    s.add_argument("--sigma", type=float, default=1.0)
    s.add_argument("--jnr", type=float, default=10.0)
    s.add_argument("--snr", type=float, default=-20.0)
    s.add_argument("--noise-power", type=float, default=1.0)
    s.set_defaults(func=cmd_synth, seed_default=0)

    s = sub.add_parser("spectrogram", parents=[common], help="render an IQ file to a PGM spectrogram")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--size", type=int, choices=IMAGE_SIZES, default=512)
    s.add_argument("--binarize-pct", type=float, default=85.0)
    s.add_argument("--window-len", type=int, default=256)
    s.add_argument("--hop", type=int, default=64)
    s.add_argument("--nfft", type=int, default=256)
    s.add_argument("--window", choices=("hann", "rectangular"), default="hann")
    s.set_defaults(func=cmd_spectrogram)

    d = sub.add_parser("dataset", help="dataset operations")
    dsub = d.add_subparsers(dest="dataset_command", required=True)
    s = dsub.add_parser("gen", parents=[common], help="generate the labelled spectrogram dataset")
    s.add_argument("--per-class-train", type=int, required=True)
    s.add_argument("--per-class-test", type=int, required=True)
    s.add_argument("--size", type=int, choices=IMAGE_SIZES, default=64)
    s.add_argument("--binarize-pct", type=float, default=85.0)
    s.add_argument("--fs", type=float, default=1e7)
    s.add_argument("--samples", type=int, default=16384)
    s.add_argument("--workers", type=int, default=1)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_dataset_gen, seed_default=0)

    s = sub.add_parser("partition", parents=[common], help="split a manifest across clients")
    s.add_argument("--manifest", required=True)
    s.add_argument("--clients", type=int, default=5)
    s.add_argument("--mode", choices=("iid", "dirichlet"), default="iid")
    s.add_argument("--beta", type=float, default=0.1)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_partition, seed_default=0)

    s = sub.add_parser("train", parents=[common], help="train one regime")
    s.add_argument("--mode", choices=("central", "fedavg", "solo"), default="central")
    s.add_argument("--client", type=int)
    s.add_argument("--rounds", type=int, default=40)
    s.add_argument("--local-epochs", type=int, default=1)
    s.add_argument("--lr", type=float, default=0.01)
    s.add_argument("--optimizer", choices=("sgd", "adam"), default="sgd")
    s.add_argument("--batch-size", type=int, default=32, help="0 for full batch")
    s.add_argument("--partition")
    s.add_argument("--train", required=True)
    s.add_argument("--test", required=True)
    s.add_argument("--metrics")
    s.add_argument("--checkpoint")
    s.add_argument("--warm-start", help="checkpoint to fine-tune from")
    s.add_argument("--reinit", action="append", default=None, choices=("conv", "dense"),
                   help="layer to re-initialise on warm start (default: dense)")
    s.add_argument("--wall-time", action="store_true", help="record wall_ms (breaks byte-identical metrics)")
    s.set_defaults(func=cmd_train, seed_default=0, precision_default="f64")

    s = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on a manifest")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--test", required=True)
    s.add_argument("--out", help="per-class accuracy CSV (kind,accuracy)")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("cn0", parents=[common], help="expected C/N0 from accuracy, or a detection timeline")
    s.add_argument("action", nargs="?", choices=("timeline",))
    s.add_argument("--eta", type=float)
    s.add_argument("--snr", type=float, help="convert an SNR (dB) to C/N0 using --bandwidth")
    s.add_argument("--clean", type=float, default=48.0)
    s.add_argument("--jammed", type=float, default=40.0)
    s.add_argument("--bandwidth", type=float, default=2e6)
    s.add_argument("--mixing", choices=("db", "linear"), default="db")
    s.add_argument("--accuracy-csv")
    s.add_argument("--events", type=int, default=1000)
    s.add_argument("--out")
    s.set_defaults(func=cmd_cn0, seed_default=0)

    s = sub.add_parser("plot", parents=[common], help="SVG figure from metrics or C/N0 CSVs")
    s.add_argument("--kind", choices=("accuracy_curve", "cn0_bars"), required=True)
    s.add_argument("--out", required=True)
    s.add_argument("csv", nargs="+")
    s.set_defaults(func=cmd_plot)

    s = sub.add_parser("run", parents=[common], help="run a full experiment from a JSON config")
    s.add_argument("--config", default="paper-desk", help="config path or shipped name")
    s.add_argument("--out", help="output directory (default: config out_dir, under $JAMFED_OUT if set)")
    s.add_argument("--force", action="store_true", help="overwrite an existing run directory")
    s.set_defaults(func=cmd_run)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    a = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if a.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if a.seed is None and hasattr(a, "seed_default"):
        a.seed = a.seed_default
    if a.precision is None and hasattr(a, "precision_default"):
        a.precision = a.precision_default
    if getattr(a, "reinit", 1) is None:
        a.reinit = ["dense"]
    try:
        with _threads(a.threads):
            a.func(a)
    except (JamfedError, OSError) as exc:
        print(f"jamfed: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
