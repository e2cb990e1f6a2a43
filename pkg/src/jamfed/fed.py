"""
Centralized, FedAvg, Solo and warm-start training over in-memory shards.

Every random choice (initial weights, per-epoch batch order) is drawn from a
stream keyed by ``(master_seed, client, round)``, so results do not depend on
the order in which clients are scheduled. Aggregation reduces clients in
index order.
"""

from __future__ import annotations

import csv
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .dataset import ClientPartition
from .errors import AggregationError, InvalidParamsError, PoisonedUpdateError, ShapeError
from .nn import (
    CnnSpec,
    ModelParams,
    Optimizer,
    OptimizerConfig,
    cast_params,
    check_params,
    evaluate_accuracy,
    images_to_input,
    init_layer,
    init_params,
    iter_batches,
    load_checkpoint,
    loss_and_grads,
    resolve_dtype,
)

NEVER = math.inf
_INIT_STREAM = 0x1417
_REINIT_STREAM = 0x2E17


@dataclass(frozen=True)
class Shard:
    """Images (uint8, N x H x W) with integer labels."""

    images: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "Shard":
        idx = np.sort(np.asarray(idx, dtype=np.int64))
        return Shard(self.images[idx], self.labels[idx])


@dataclass(frozen=True)
class FedConfig:
    num_clients: int = 5
    rounds: int = 40
    local_epochs: int = 1
    optimizer: OptimizerConfig = OptimizerConfig()
    batch_size: Optional[int] = 32
    master_seed: int = 0
    precision: str = "f64"
    threads: int = 1
    record_wall_time: bool = False

    def __post_init__(self):
        if self.rounds < 1:
            raise InvalidParamsError("rounds must be >= 1")
        if self.local_epochs < 1:
            raise InvalidParamsError("local_epochs must be >= 1")
        if self.num_clients < 1:
            raise InvalidParamsError("num_clients must be >= 1")
        if self.batch_size is not None and self.batch_size < 0:
            raise InvalidParamsError("batch_size must be positive (or 0/None for full batch)")
        resolve_dtype(self.precision)

    @property
    def dtype(self):
        return resolve_dtype(self.precision)


@dataclass
class RoundMetrics:
    round: int
    test_accuracy: float
    client_losses: dict = field(default_factory=dict)
    mean_train_loss: float = float("nan")
    wall_ms: float = 0.0


@dataclass(frozen=True)
class WarmStartSpec:
    source: Union[str, Path, dict]
    reinit_layers: tuple = ("dense",)


def batch_stream(master_seed: int, client: int, round_idx: int) -> np.random.Generator:
    return np.random.default_rng([int(master_seed), int(client), int(round_idx)])


def initial_params(spec: CnnSpec, cfg: FedConfig) -> ModelParams:
    return init_params(spec, [int(cfg.master_seed), _INIT_STREAM], cfg.dtype)


def local_update(
    global_params: ModelParams,
    shard: Shard,
    cfg: FedConfig,
    client: int = 0,
    round_idx: int = 1,
    optimizer: Optional[Optimizer] = None,
):
    """Run ``cfg.local_epochs`` epochs of mini-batch training from ``global_params``.

    Returns ``(params, mean_loss)``; ``global_params`` is not modified.
    """
    if len(shard) == 0:
        raise InvalidParamsError(f"client {client} has no samples")
    opt = optimizer if optimizer is not None else Optimizer(cfg.optimizer)
    params = global_params
    dtype = params["conv.weight"].dtype
    rng = batch_stream(cfg.master_seed, client, round_idx)
    losses, weights = [], []
    for _ in range(cfg.local_epochs):
        order = rng.permutation(len(shard))
        for b in iter_batches(len(shard), cfg.batch_size, order):
            b = np.sort(b) if len(b) == len(shard) else b
            loss, grads = loss_and_grads(params, images_to_input(shard.images[b], dtype), shard.labels[b])
            if not math.isfinite(loss):
                raise PoisonedUpdateError(f"non-finite loss on client {client}, round {round_idx}")
            try:
                params = opt.step(params, grads)
            except PoisonedUpdateError as exc:
                raise PoisonedUpdateError(f"client {client}, round {round_idx}: {exc}") from exc
            losses.append(loss)
            weights.append(len(b))
    return params, float(np.average(losses, weights=weights))


def aggregate(locals_: Sequence[ModelParams], sizes: Sequence[int]) -> ModelParams:
    """Size-weighted average of client parameters.

    Uses compensated (Neumaier) summation in client-index order and clips the
    result to the elementwise client range, so the output is always a convex
    combination of its inputs.
    """
    if not locals_:
        raise AggregationError("nothing to aggregate")
    if len(locals_) != len(sizes):
        raise AggregationError(f"{len(locals_)} parameter sets but {len(sizes)} sizes")
    if any(s <= 0 for s in sizes):
        raise AggregationError(f"client sizes must be positive, got {list(sizes)}")
    names = list(locals_[0])
    for i, p in enumerate(locals_[1:], start=1):
        if list(p) != names:
            raise AggregationError(f"client {i} parameter names {list(p)} differ from {names}")
        for n in names:
            if p[n].shape != locals_[0][n].shape:
                raise AggregationError(
                    f"tensor {n!r}: client {i} has shape {p[n].shape}, client 0 has {locals_[0][n].shape}"
                )
    total = float(sum(sizes))
    weights = [s / total for s in sizes]
    out = type(locals_[0])()
    for n in names:
        dtype = locals_[0][n].dtype
        acc = np.zeros(locals_[0][n].shape, dtype=np.float64)
        comp = np.zeros_like(acc)
        lo = hi = locals_[0][n].astype(np.float64)
        for w, p in zip(weights, locals_):
            term = w * p[n].astype(np.float64)
            t = acc + term
            comp += np.where(np.abs(acc) >= np.abs(term), (acc - t) + term, (term - t) + acc)
            acc = t
            lo = np.minimum(lo, p[n])
            hi = np.maximum(hi, p[n])
        out[n] = np.clip(acc + comp, lo, hi).astype(dtype)
    return out


def _timed():
    start = time.perf_counter()
    return lambda: (time.perf_counter() - start) * 1000.0


def run_fedavg(
    cfg: FedConfig,
    partition: ClientPartition,
    train: Shard,
    test: Shard,
    spec: Optional[CnnSpec] = None,
    init: Optional[ModelParams] = None,
    on_round: Optional[Callable[[RoundMetrics], None]] = None,
):
    """T rounds of broadcast -> local update -> size-weighted aggregation."""
    spec = spec or CnnSpec(train.images.shape[1])
    params = cast_params(init, cfg.dtype) if init is not None else initial_params(spec, cfg)
    check_params(params, spec)
    shards = {m: train.subset(idx) for m, idx in enumerate(partition.clients) if len(idx) > 0}
    if not shards:
        raise InvalidParamsError("partition has no non-empty clients")
    metrics = []
    pool = ThreadPoolExecutor(cfg.threads) if cfg.threads > 1 else None
    try:
        for t in range(1, cfg.rounds + 1):
            elapsed = _timed()
            clients = sorted(shards)

            def work(m, params=params, t=t):
                return local_update(params, shards[m], cfg, m, t)

            results = list(pool.map(work, clients)) if pool else [work(m) for m in clients]
            sizes = [len(shards[m]) for m in clients]
            params = aggregate([r[0] for r in results], sizes)
            losses = {m: r[1] for m, r in zip(clients, results)}
            rm = RoundMetrics(
                round=t,
                test_accuracy=evaluate_accuracy(params, test.images, test.labels),
                client_losses=losses,
                mean_train_loss=float(np.average([losses[m] for m in clients], weights=sizes)),
            )
            rm.wall_ms = elapsed() if cfg.record_wall_time else 0.0
            metrics.append(rm)
            if on_round:
                on_round(rm)
    finally:
        if pool:
            pool.shutdown()
    return params, metrics


def _train_single(cfg, shard, test, spec, init, client, on_round):
    spec = spec or CnnSpec(shard.images.shape[1])
    params = cast_params(init, cfg.dtype) if init is not None else initial_params(spec, cfg)
    check_params(params, spec)
    opt = Optimizer(cfg.optimizer)
    metrics = []
    for t in range(1, cfg.rounds + 1):
        elapsed = _timed()
        params, loss = local_update(params, shard, cfg, client, t, optimizer=opt)
        rm = RoundMetrics(t, evaluate_accuracy(params, test.images, test.labels), {client: loss}, loss)
        rm.wall_ms = elapsed() if cfg.record_wall_time else 0.0
        metrics.append(rm)
        if on_round:
            on_round(rm)
    return params, metrics


def run_centralized(cfg: FedConfig, train: Shard, test: Shard, spec=None, init=None, on_round=None):
    """Train on the pooled set; one round = ``local_epochs`` epochs."""
    return _train_single(cfg, train, test, spec, init, 0, on_round)


def run_solo(
    cfg: FedConfig,
    partition: ClientPartition,
    client: int,
    train: Shard,
    test: Shard,
    spec=None,
    init=None,
    on_round=None,
    keep_classes: Optional[Sequence[int]] = None,
):
    """Train only on ``client``'s shard, evaluated on the full test set.

    ``keep_classes`` optionally restricts the shard to the listed labels.
    """
    if not 0 <= client < partition.num_clients:
        raise InvalidParamsError(f"client {client} out of range for {partition.num_clients} clients")
    idx = np.asarray(partition.clients[client], dtype=np.int64)
    if keep_classes is not None:
        idx = idx[np.isin(train.labels[idx], list(keep_classes))]
    if len(idx) == 0:
        raise InvalidParamsError(f"solo client {client} has no samples")
    return _train_single(cfg, train.subset(idx), test, spec, init, client, on_round)


def two_class_client(partition: ClientPartition, labels: np.ndarray, num_classes: int = 2):
    """The client whose top-``num_classes`` labels make up the largest share of its data.

    Returns ``(client, classes)``, classes sorted by descending count.
    """
    mat = partition.class_matrix(labels)
    best, best_key = None, None
    for m, row in enumerate(mat):
        if row.sum() == 0:
            continue
        top = np.argsort(-row, kind="stable")[:num_classes]
        if np.count_nonzero(row[top]) < num_classes:
            continue
        key = (row[top].sum() / row.sum(), row[top].sum())
        if best_key is None or key > best_key:
            best, best_key = (m, [int(c) for c in top]), key
    if best is None:
        raise InvalidParamsError(f"no client holds {num_classes} classes")
    return best


def rounds_to_threshold(accuracies: Sequence[float], threshold: float):
    """Index of the first accuracy >= threshold (index 0 = before training)."""
    for i, a in enumerate(accuracies):
        if a >= threshold:
            return i
    return NEVER


def load_warm_params(spec_ws: WarmStartSpec, spec: CnnSpec, cfg: FedConfig) -> ModelParams:
    """Source parameters with ``reinit_layers`` freshly initialised."""
    src = load_checkpoint(spec_ws.source) if isinstance(spec_ws.source, (str, Path)) else spec_ws.source
    rng = np.random.default_rng([int(cfg.master_seed), _REINIT_STREAM])
    fresh = init_params(spec, 0, cfg.dtype)
    params = type(fresh)()
    for layer in ("conv", "dense"):
        names = [n for n in fresh if n.startswith(layer + ".")]
        if layer in spec_ws.reinit_layers:
            params.update(init_layer(spec, layer, rng, cfg.dtype))
            continue
        for n in names:
            if n not in src:
                raise ShapeError(f"warm-start source lacks tensor {n!r}")
            if src[n].shape != fresh[n].shape:
                raise ShapeError(f"warm-start tensor {n!r} has shape {src[n].shape}, model needs {fresh[n].shape}")
            params[n] = src[n].astype(cfg.dtype)
    return params


def warm_start(
    spec_ws: WarmStartSpec,
    cfg: FedConfig,
    train: Shard,
    test: Shard,
    threshold: float = 0.85,
    spec: Optional[CnnSpec] = None,
    stop_at_threshold: bool = False,
):
    """Fine-tune from a checkpoint; returns ``(params, metrics, rounds_to_threshold)``.

    Round 0 is the accuracy of the loaded model before any update.
    """
    spec = spec or CnnSpec(train.images.shape[1])
    params = load_warm_params(spec_ws, spec, cfg)
    accs = [evaluate_accuracy(params, test.images, test.labels)]
    if stop_at_threshold and accs[0] >= threshold:
        return params, [], 0
    opt = Optimizer(cfg.optimizer)
    metrics = []
    for t in range(1, cfg.rounds + 1):
        params, loss = local_update(params, train, cfg, 0, t, optimizer=opt)
        acc = evaluate_accuracy(params, test.images, test.labels)
        metrics.append(RoundMetrics(t, acc, {0: loss}, loss))
        accs.append(acc)
        if stop_at_threshold and acc >= threshold:
            break
    return params, metrics, rounds_to_threshold(accs, threshold)


METRICS_COLUMNS = ("round", "test_accuracy", "mean_train_loss", "wall_ms")


def write_metrics_csv(path: Union[str, Path], metrics: Sequence[RoundMetrics]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRICS_COLUMNS)
        for m in metrics:
            w.writerow([m.round, repr(float(m.test_accuracy)), repr(float(m.mean_train_loss)), repr(float(m.wall_ms))])


def read_metrics_csv(path: Union[str, Path]) -> list:
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        for m in reader:
            rows.append(RoundMetrics(int(m["round"]), float(m["test_accuracy"]), {}, float(m["mean_train_loss"]), float(m["wall_ms"])))
    return rows
