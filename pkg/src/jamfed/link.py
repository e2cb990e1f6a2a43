"""Zone-level C/N0 as a function of jammer classification accuracy."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .errors import InvalidParamsError

JAMMER_LABELS = ("AM", "Chirp", "FM", "DME", "NB")


@dataclass(frozen=True)
class LinkBudget:
    clean_cn0_dbhz: float = 48.0
    jammed_cn0_dbhz: float = 40.0
    bandwidth_hz: float = 2e6

    def __post_init__(self):
        if self.clean_cn0_dbhz < self.jammed_cn0_dbhz:
            raise InvalidParamsError("clean C/N0 must not be below the jammed C/N0")
        if not self.bandwidth_hz > 0:
            raise InvalidParamsError("bandwidth must be positive")


@dataclass
class ZoneReport:
    zone: int
    per_kind_accuracy: dict
    eta: float
    expected_cn0_dbhz: float
    mean_event_cn0_dbhz: float
    sum_event_cn0_dbhz: float
    num_events: int
    detected_fraction: float


def cn0_from_snr(snr_db: float, bandwidth_hz: float) -> float:
    """C/N0 = SNR * B, in dB-Hz."""
    if not bandwidth_hz > 0:
        raise InvalidParamsError(f"bandwidth must be positive, got {bandwidth_hz}")
    return snr_db + 10.0 * math.log10(bandwidth_hz)


def snr_from_cn0(cn0_dbhz: float, bandwidth_hz: float) -> float:
    return cn0_dbhz - cn0_from_snr(0.0, bandwidth_hz)


def expected_cn0(eta: float, budget: LinkBudget = LinkBudget(), mixing: str = "db") -> float:
    """Per-event expectation eta * clean + (1 - eta) * jammed.

    ``mixing='db'`` combines the dB-Hz figures directly; ``'linear'`` averages
    the linear ratios and converts back, for comparison.
    """
    if not 0.0 <= eta <= 1.0:
        raise InvalidParamsError(f"accuracy must lie in [0, 1], got {eta}")
    clean, jammed = budget.clean_cn0_dbhz, budget.jammed_cn0_dbhz
    if mixing == "db":
        return eta * clean + (1.0 - eta) * jammed
    if mixing == "linear":
        lin = eta * 10 ** (clean / 10) + (1.0 - eta) * 10 ** (jammed / 10)
        return 10.0 * math.log10(lin)
    raise InvalidParamsError(f"mixing must be 'db' or 'linear', got {mixing!r}")


def random_schedule(num_events: int, seed, kinds: Sequence[str] = JAMMER_LABELS, dt_s: float = 1.0) -> list:
    """``num_events`` (time, kind) pairs with kinds drawn uniformly."""
    if num_events < 1:
        raise InvalidParamsError("schedule needs at least one event")
    rng = np.random.default_rng(seed)
    picks = rng.integers(0, len(kinds), num_events)
    return [(i * dt_s, kinds[k]) for i, k in enumerate(picks)]


def zone_timeline(
    accuracy: Mapping[str, float],
    budget: LinkBudget,
    schedule: Sequence,
    seed,
    zone: int = 0,
    mixing: str = "db",
):
    """Simulate detection of each scheduled jamming event.

    An event of kind k is detected with probability ``accuracy[k]``; detected
    events see the clean C/N0, missed ones the jammed C/N0. Returns the
    ``ZoneReport`` and the per-event C/N0 array.
    """
    if not schedule:
        raise InvalidParamsError("schedule must contain at least one event")
    for k, a in accuracy.items():
        if not 0.0 <= a <= 1.0:
            raise InvalidParamsError(f"accuracy for {k} must lie in [0, 1], got {a}")
    kinds = [k for _, k in schedule]
    unknown = sorted(set(kinds) - set(accuracy))
    if unknown:
        raise InvalidParamsError(f"no accuracy given for jammer kind(s) {unknown}")
    p = np.array([accuracy[k] for k in kinds], dtype=np.float64)
    rng = np.random.default_rng(seed)
    detected = rng.random(len(p)) < p
    series = np.where(detected, budget.clean_cn0_dbhz, budget.jammed_cn0_dbhz).astype(np.float64)
    eta = float(p.mean())
    report = ZoneReport(
        zone=zone,
        per_kind_accuracy=dict(accuracy),
        eta=eta,
        expected_cn0_dbhz=expected_cn0(eta, budget, mixing),
        mean_event_cn0_dbhz=float(series.mean()),
        sum_event_cn0_dbhz=float(series.sum()),
        num_events=len(series),
        detected_fraction=float(detected.mean()),
    )
    return report, series
