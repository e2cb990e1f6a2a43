"""Labelled spectrogram datasets and their client partitions."""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Union

import numpy as np

from .errors import InvalidParamsError, PartitionError
from .signals import (
    JAMMER_KINDS,
    KIND_LABELS,
    ReceivedSignalSpec,
    SampleGrid,
    compose_received,
    default_ranges,
    params_to_dict,
    sample_jammer_params,
)
from .spectrogram import CLASS_LABELS, IMAGE_SIZES, StftConfig, read_pgm_array, render_image, resize, write_pgm

LABEL_INDEX = {label: i for i, label in enumerate(CLASS_LABELS)}
# class order matches CLASS_LABELS: AM, Chirp, FM, DME, NB, No
CLASS_KINDS = tuple(JAMMER_KINDS) + ("none",)
SPLITS = ("train", "test")


@dataclass(frozen=True)
class SynthConfig:
    sample_rate_hz: float = 1e7
    num_samples: int = 16384
    jnr_db: tuple = (5.0, 15.0)
    snr_db: float = -20.0
    noise_power_w: float = 1.0
    # per-kind overrides of default_ranges(), field -> [lo, hi]
    ranges: Mapping = field(default_factory=dict)

    def ranges_for(self, kind: str) -> dict:
        r = default_ranges(kind, self.sample_rate_hz, self.num_samples)
        r.update({k: tuple(v) for k, v in self.ranges.get(kind, {}).items()})
        return r


@dataclass(frozen=True)
class ImageConfig:
    size: int = 64
    binarize_pct: float = 85.0

    def __post_init__(self):
        if self.size not in IMAGE_SIZES:
            raise InvalidParamsError(f"image size must be one of {IMAGE_SIZES}, got {self.size}")


@dataclass
class DatasetManifest:
    split: str
    entries: list
    root: Optional[Path] = None

    @property
    def labels(self) -> np.ndarray:
        return np.array([LABEL_INDEX[e["label"]] for e in self.entries], dtype=np.int64)

    @property
    def class_counts(self) -> dict:
        counts = {label: 0 for label in CLASS_LABELS}
        for e in self.entries:
            counts[e["label"]] += 1
        return counts

    def __len__(self) -> int:
        return len(self.entries)

    def to_jsonl(self) -> str:
        lines = [json.dumps(e, sort_keys=True) for e in self.entries]
        return "\n".join(lines) + "\n"

    def save(self, path: Union[str, Path]) -> None:
        Path(path).write_text(self.to_jsonl())

    @classmethod
    def load(cls, path: Union[str, Path]) -> "DatasetManifest":
        path = Path(path)
        entries = [json.loads(line) for line in path.read_text().splitlines() if line.strip()]
        for e in entries:
            if e.get("label") not in LABEL_INDEX:
                raise InvalidParamsError(f"{path}: unknown label {e.get('label')!r}")
        split = entries[0]["split"] if entries else path.stem
        return cls(split, entries, path.parent)

    def load_images(self) -> tuple:
        """All images stacked as uint8 (N, H, W) together with integer labels."""
        if self.root is None:
            raise InvalidParamsError("manifest has no root directory to resolve image paths")
        images = np.stack([read_pgm_array(self.root / e["path"]) for e in self.entries])
        return images, self.labels


def image_seed(master_seed: int, split: str, class_index: int, index: int) -> int:
    ss = np.random.SeedSequence([int(master_seed), SPLITS.index(split), class_index, index])
    return int(ss.generate_state(1, np.uint64)[0])


def make_example(
    kind: str,
    seed: int,
    synth: SynthConfig,
    stft_cfg: StftConfig,
    image: ImageConfig,
):
    """Render one labelled spectrogram. Returns (image, params echo, jnr_db)."""
    grid = SampleGrid(synth.sample_rate_hz, synth.num_samples)
    p_ss, jnr_ss, rx_ss = np.random.SeedSequence(seed).spawn(3)
    jammer = None if kind == "none" else sample_jammer_params(kind, synth.ranges_for(kind), p_ss)
    lo, hi = synth.jnr_db
    jnr = float(np.random.default_rng(jnr_ss).uniform(lo, hi))
    rx_seed = int(rx_ss.generate_state(1, np.uint64)[0])
    spec = ReceivedSignalSpec(jammer, jnr, synth.snr_db, synth.noise_power_w, rx_seed)
    series = compose_received(spec, grid)
    img = render_image(series, stft_cfg, 512, image.binarize_pct, KIND_LABELS[kind])
    if image.size != 512:
        img = resize(img, image.size)
    echo = params_to_dict(jammer) if jammer is not None else None
    return img, echo, jnr


def generate_split(
    out_dir: Union[str, Path],
    split: str,
    per_class: int,
    synth: SynthConfig = SynthConfig(),
    stft_cfg: StftConfig = StftConfig(),
    image: ImageConfig = ImageConfig(),
    master_seed: int = 0,
    workers: int = 1,
) -> DatasetManifest:
    if per_class < 1:
        raise InvalidParamsError(f"per-class count must be >= 1, got {per_class}")
    out_dir = Path(out_dir)
    jobs = []
    for ci, kind in enumerate(CLASS_KINDS):
        label = KIND_LABELS[kind]
        (out_dir / split / label).mkdir(parents=True, exist_ok=True)
        for i in range(per_class):
            jobs.append((kind, label, i, image_seed(master_seed, split, ci, i)))

    def work(job):
        kind, label, i, seed = job
        img, echo, jnr = make_example(kind, seed, synth, stft_cfg, image)
        rel = f"{split}/{label}/{i:05d}.pgm"
        try:
            write_pgm(out_dir / rel, img)
        except OSError as exc:
            raise OSError(f"failed to write {out_dir / rel}: {exc}") from exc
        return {"path": rel, "label": label, "seed": seed, "split": split, "jnr_db": jnr, "params": echo}

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            entries = list(pool.map(work, jobs))
    else:
        entries = [work(j) for j in jobs]
    manifest = DatasetManifest(split, entries, out_dir)
    manifest.save(out_dir / f"{split}.jsonl")
    return manifest


def generate_dataset(
    out_dir: Union[str, Path],
    per_class_train: int,
    per_class_test: int,
    synth: SynthConfig = SynthConfig(),
    stft_cfg: StftConfig = StftConfig(),
    image: ImageConfig = ImageConfig(),
    master_seed: int = 0,
    workers: int = 1,
):
    """Write train/test images plus ``train.jsonl`` / ``test.jsonl`` under ``out_dir``."""
    train = generate_split(out_dir, "train", per_class_train, synth, stft_cfg, image, master_seed, workers)
    test = generate_split(out_dir, "test", per_class_test, synth, stft_cfg, image, master_seed, workers)
    return train, test


# ---------------------------------------------------------------------------
# Partitioning
# ---------------------------------------------------------------------------


@dataclass
class ClientPartition:
    clients: list
    mode: str
    num_samples: int
    beta: Optional[float] = None
    seed: int = 0

    @property
    def num_clients(self) -> int:
        return len(self.clients)

    @property
    def sizes(self) -> list:
        return [len(c) for c in self.clients]

    def validate(self) -> None:
        """Raise unless the client lists form a set partition of range(num_samples)."""
        allidx = np.concatenate([np.asarray(c, dtype=np.int64) for c in self.clients]) if self.clients else np.array([])
        if len(allidx) != self.num_samples or not np.array_equal(np.sort(allidx), np.arange(self.num_samples)):
            raise PartitionError("client index sets are not a disjoint cover of the dataset")

    def class_matrix(self, labels: np.ndarray, num_classes: int = len(CLASS_LABELS)) -> np.ndarray:
        """(clients, classes) sample counts."""
        labels = np.asarray(labels)
        return np.stack([np.bincount(labels[np.asarray(c, dtype=np.int64)], minlength=num_classes) for c in self.clients])

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "beta": self.beta,
            "seed": self.seed,
            "num_clients": self.num_clients,
            "num_samples": self.num_samples,
            "clients": [[int(i) for i in c] for c in self.clients],
        }

    def save(self, path: Union[str, Path]) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: Union[str, Path]) -> "ClientPartition":
        d = json.loads(Path(path).read_text())
        part = cls([np.asarray(c, dtype=np.int64) for c in d["clients"]], d["mode"], d["num_samples"], d.get("beta"), d.get("seed", 0))
        part.validate()
        return part


def _labels_of(data) -> np.ndarray:
    return np.asarray(data.labels if hasattr(data, "labels") else data, dtype=np.int64)


def iid_partition(data, num_clients: int, seed: int = 0) -> ClientPartition:
    """Equal (+-1) share of every class per client.

    Leftovers are dealt round-robin, continuing where the previous class
    stopped, so total client sizes also differ by at most one.
    """
    labels = _labels_of(data)
    if num_clients < 1:
        raise PartitionError("num_clients must be >= 1")
    if num_clients > len(labels):
        raise PartitionError(f"{num_clients} clients requested for {len(labels)} samples")
    rng = np.random.default_rng(seed)
    buckets = [[] for _ in range(num_clients)]
    offset = 0
    for c in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == c))
        for pos, i in enumerate(idx):
            buckets[(pos + offset) % num_clients].append(i)
        offset += len(idx)
    clients = [rng.permutation(np.asarray(b, dtype=np.int64)) for b in buckets]
    return ClientPartition(clients, "iid", len(labels), None, seed)


def largest_remainder(shares: np.ndarray, total: int) -> np.ndarray:
    """Integer counts summing to ``total``, proportional to ``shares``."""
    shares = np.asarray(shares, dtype=np.float64)
    raw = shares / shares.sum() * total
    counts = np.floor(raw).astype(np.int64)
    short = total - int(counts.sum())
    if short > 0:
        order = np.argsort(-(raw - counts), kind="stable")
        counts[order[:short]] += 1
    return counts


def dirichlet_partition(data, num_clients: int, beta: float, seed: int = 0) -> ClientPartition:
    """Per-class Dirichlet(beta) split of every class across clients.

    Small ``beta`` concentrates each class on a few clients; clients may end
    up with no samples at all.
    """
    labels = _labels_of(data)
    if num_clients < 1:
        raise PartitionError("num_clients must be >= 1")
    if not (beta > 0 and math.isfinite(beta)):
        raise PartitionError(f"Dirichlet concentration must be positive, got {beta}")
    rng = np.random.default_rng(seed)
    buckets = [[] for _ in range(num_clients)]
    for c in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == c))
        p = rng.dirichlet(np.full(num_clients, float(beta)))
        counts = largest_remainder(p, len(idx))
        start = 0
        for m, k in enumerate(counts):
            buckets[m].extend(idx[start : start + k])
            start += k
    clients = [rng.permutation(np.asarray(b, dtype=np.int64)) for b in buckets]
    return ClientPartition(clients, "dirichlet", len(labels), float(beta), seed)


def label_skew(partition: ClientPartition, labels: np.ndarray) -> float:
    """Mean total-variation distance between non-empty clients' label mix and uniform."""
    mat = partition.class_matrix(labels).astype(np.float64)
    mat = mat[mat.sum(axis=1) > 0]
    if len(mat) == 0:
        return 0.0
    dist = mat / mat.sum(axis=1, keepdims=True)
    return float(np.mean(0.5 * np.abs(dist - 1.0 / mat.shape[1]).sum(axis=1)))
