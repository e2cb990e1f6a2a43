"""
Complex-baseband synthesis of GNSS-band jamming signals.

Five jammer families are supported, each evaluated sample-by-sample from its
closed-form model:

- AM   : sum of continuous-wave tones (single or multi-tone)
- Chirp: linear frequency sweep, restarted every sweep period (sawtooth)
- FM   : tones whose phase is modulated by a sinusoid at the tone frequency
- DME  : rectangular pulse trains gating a carrier
- NB   : real cosine with a random-walk phase (narrow-band noise)

The received signal is r = s + j + w, where s is a BPSK chip stream standing
in for the navigation signal, j the jammer and w circular AWGN. Jammer and
useful-signal amplitudes are set at composition time from JNR / SNR figures
relative to the noise power; the absolute powers inside the jammer parameters
only fix the relative weighting of tones.
"""

from __future__ import annotations

import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Mapping, Optional, Union

import numpy as np

from .errors import FormatError, FrequencyAliasingError, InvalidParamsError

SeedLike = Union[int, np.random.SeedSequence, None]

JAMMER_KINDS = ("am", "chirp", "fm", "dme", "nb")
KIND_LABELS = {"am": "AM", "chirp": "Chirp", "fm": "FM", "dme": "DME", "nb": "NB", "none": "No"}

IQ_MAGIC = b"JFIQ"
IQ_VERSION = 1
_IQ_HEADER = struct.Struct("<4sHHd")


@dataclass(frozen=True)
class SampleGrid:
    sample_rate_hz: float
    num_samples: int
    t0_s: float = 0.0

    def __post_init__(self):
        if not (self.sample_rate_hz > 0 and math.isfinite(self.sample_rate_hz)):
            raise InvalidParamsError(f"sample_rate_hz must be positive, got {self.sample_rate_hz}")
        if int(self.num_samples) != self.num_samples or self.num_samples < 1:
            raise InvalidParamsError(f"num_samples must be a positive integer, got {self.num_samples}")

    @property
    def duration_s(self) -> float:
        return self.num_samples / self.sample_rate_hz

    @property
    def nyquist_hz(self) -> float:
        return self.sample_rate_hz / 2.0

    def times(self) -> np.ndarray:
        return self.t0_s + np.arange(self.num_samples, dtype=np.float64) / self.sample_rate_hz


@dataclass(frozen=True)
class ComplexSeries:
    grid: SampleGrid
    samples: np.ndarray

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.complex128)
        if samples.ndim != 1 or samples.shape[0] != self.grid.num_samples:
            raise InvalidParamsError(
                f"series holds {samples.shape} samples, grid expects {self.grid.num_samples}"
            )
        if not np.all(np.isfinite(samples)):
            raise InvalidParamsError("series contains non-finite samples")
        object.__setattr__(self, "samples", samples)

    def mean_power(self) -> float:
        return float(np.mean(np.abs(self.samples) ** 2))

    def __add__(self, other: "ComplexSeries") -> "ComplexSeries":
        if other.grid != self.grid:
            raise InvalidParamsError("cannot add series defined on different grids")
        return ComplexSeries(self.grid, self.samples + other.samples)


# ---------------------------------------------------------------------------
# Jammer parameter variants
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Tone:
    power_w: float
    freq_hz: float
    phase_rad: float = 0.0


@dataclass(frozen=True)
class FMTone:
    power_w: float
    freq_hz: float
    mod_index: float


@dataclass(frozen=True)
class PulseTrain:
    rep_freq_hz: float
    carrier_hz: float


@dataclass(frozen=True)
class AMParams:
    tones: tuple
    kind = "am"


@dataclass(frozen=True)
class ChirpParams:
    power_w: float
    center_hz: float
    f_min_hz: float
    f_max_hz: float
    sweep_period_s: float
    direction: int = 1
    phase_rad: float = 0.0
    kind = "chirp"


@dataclass(frozen=True)
class FMParams:
    tones: tuple
    kind = "fm"


@dataclass(frozen=True)
class DMEParams:
    power_w: float
    duty_cycle: float
    pulses: tuple
    kind = "dme"


@dataclass(frozen=True)
class NBParams:
    power_w: float
    center_hz: float
    mod_index: float
    process_sigma: float
    phase_rad: float = 0.0
    kind = "nb"


JammerParams = Union[AMParams, ChirpParams, FMParams, DMEParams, NBParams]

_PARAM_TYPES = {cls.kind: cls for cls in (AMParams, ChirpParams, FMParams, DMEParams, NBParams)}


def params_to_dict(params: JammerParams) -> dict:
    """Plain-dict echo of a parameter set, tagged with its kind."""
    return {"kind": params.kind, **asdict(params)}


def params_from_dict(d: Mapping) -> JammerParams:
    d = dict(d)
    kind = d.pop("kind")
    if kind not in _PARAM_TYPES:
        raise InvalidParamsError(f"unknown jammer kind {kind!r}")
    if kind == "am":
        d["tones"] = tuple(Tone(**t) for t in d["tones"])
    elif kind == "fm":
        d["tones"] = tuple(FMTone(**t) for t in d["tones"])
    elif kind == "dme":
        d["pulses"] = tuple(PulseTrain(**p) for p in d["pulses"])
    return _PARAM_TYPES[kind](**d)


def _check_below_nyquist(freq_hz: float, grid: SampleGrid, what: str) -> None:
    if abs(freq_hz) >= grid.nyquist_hz:
        raise FrequencyAliasingError(
            f"{what} = {freq_hz:g} Hz is not below Nyquist ({grid.nyquist_hz:g} Hz)"
        )


def _check_power(p: float) -> None:
    if not p > 0:
        raise InvalidParamsError(f"power must be positive, got {p}")


def validate_params(params: JammerParams, grid: SampleGrid) -> None:
    """Raise if ``params`` cannot be rendered on ``grid`` without aliasing."""
    if isinstance(params, AMParams):
        if not params.tones:
            raise InvalidParamsError("AM jammer needs at least one tone")
        for t in params.tones:
            _check_power(t.power_w)
            _check_below_nyquist(t.freq_hz, grid, "AM tone frequency")
    elif isinstance(params, ChirpParams):
        _check_power(params.power_w)
        if params.f_min_hz > params.f_max_hz:
            raise InvalidParamsError("chirp needs f_min_hz <= f_max_hz")
        if not params.sweep_period_s > 0:
            raise InvalidParamsError("chirp sweep period must be positive")
        if params.direction not in (1, -1):
            raise InvalidParamsError("chirp direction must be +1 or -1")
        _check_below_nyquist(params.center_hz, grid, "chirp start frequency")
        end = params.center_hz + params.direction * (params.f_max_hz - params.f_min_hz)
        _check_below_nyquist(end, grid, "chirp end frequency")
    elif isinstance(params, FMParams):
        if not params.tones:
            raise InvalidParamsError("FM jammer needs at least one tone")
        for t in params.tones:
            _check_power(t.power_w)
            # instantaneous frequency is f * (1 + beta * cos(...))
            _check_below_nyquist(abs(t.freq_hz) * (1 + abs(t.mod_index)), grid, "FM peak frequency")
    elif isinstance(params, DMEParams):
        _check_power(params.power_w)
        if not 0 < params.duty_cycle <= 1:
            raise InvalidParamsError(f"duty cycle must lie in (0, 1], got {params.duty_cycle}")
        if not params.pulses:
            raise InvalidParamsError("DME jammer needs at least one pulse train")
        for p in params.pulses:
            if not p.rep_freq_hz > 0:
                raise InvalidParamsError("pulse repetition frequency must be positive")
            _check_below_nyquist(p.carrier_hz, grid, "DME carrier frequency")
    elif isinstance(params, NBParams):
        _check_power(params.power_w)
        if params.process_sigma < 0:
            raise InvalidParamsError("process_sigma must be non-negative")
        _check_below_nyquist(params.center_hz, grid, "NB center frequency")
    else:
        raise InvalidParamsError(f"unsupported jammer parameters {type(params).__name__}")


def synthesize_jammer(params: JammerParams, grid: SampleGrid, seed: SeedLike = 0) -> ComplexSeries:
    """Evaluate the jammer model of ``params`` on every instant of ``grid``.

    ``seed`` only matters for NB, whose phase is driven by a Gaussian process.
    """
    validate_params(params, grid)
    t = grid.times()

    if isinstance(params, AMParams):
        x = np.zeros(grid.num_samples, dtype=np.complex128)
        for tone in params.tones:
            x += math.sqrt(tone.power_w) * np.exp(1j * (2 * np.pi * tone.freq_hz * t + tone.phase_rad))

    elif isinstance(params, ChirpParams):
        rate = params.direction * (params.f_max_hz - params.f_min_hz) / params.sweep_period_s
        tau = np.mod(t, params.sweep_period_s)
        phase = 2 * np.pi * params.center_hz * t + np.pi * rate * tau**2 + params.phase_rad
        x = math.sqrt(params.power_w) * np.exp(1j * phase)

    elif isinstance(params, FMParams):
        x = np.zeros(grid.num_samples, dtype=np.complex128)
        for tone in params.tones:
            arg = 2 * np.pi * tone.freq_hz * t
            x += math.sqrt(tone.power_w) * np.exp(1j * (arg + tone.mod_index * np.sin(arg)))

    elif isinstance(params, DMEParams):
        x = np.zeros(grid.num_samples, dtype=np.complex128)
        for p in params.pulses:
            period = 1.0 / p.rep_freq_hz
            active = np.mod(t, period) < params.duty_cycle * period
            x += active * np.exp(1j * 2 * np.pi * p.carrier_hz * t)
        x *= math.sqrt(params.power_w)

    elif isinstance(params, NBParams):
        rng = np.random.default_rng(seed)
        # rectangle-rule integral of the driving process, starting at zero
        n = rng.standard_normal(grid.num_samples) * params.process_sigma
        integral = np.concatenate(([0.0], np.cumsum(n[:-1]))) / grid.sample_rate_hz
        phase = 2 * np.pi * params.center_hz * t + params.mod_index * integral + params.phase_rad
        x = (math.sqrt(params.power_w) * np.cos(phase)).astype(np.complex128)

    else:  # pragma: no cover - validate_params already rejected it
        raise InvalidParamsError(type(params).__name__)

    return ComplexSeries(grid, x)


def synthesize_awgn(grid: SampleGrid, noise_power_w: float, seed: SeedLike) -> ComplexSeries:
    """Circular complex Gaussian noise with total variance ``noise_power_w``."""
    if not noise_power_w > 0:
        raise InvalidParamsError(f"noise_power_w must be positive, got {noise_power_w}")
    rng = np.random.default_rng(seed)
    scale = math.sqrt(noise_power_w / 2.0)
    iq = rng.standard_normal((grid.num_samples, 2)) * scale
    return ComplexSeries(grid, iq[:, 0] + 1j * iq[:, 1])


def synthesize_useful(
    grid: SampleGrid, power_w: float, seed: SeedLike, samples_per_chip: int = 16
) -> ComplexSeries:
    """Random BPSK chip stream with constant modulus sqrt(power_w)."""
    if not power_w > 0:
        raise InvalidParamsError(f"power_w must be positive, got {power_w}")
    if samples_per_chip < 1:
        raise InvalidParamsError("samples_per_chip must be >= 1")
    rng = np.random.default_rng(seed)
    n_chips = -(-grid.num_samples // samples_per_chip)
    chips = rng.integers(0, 2, n_chips) * 2.0 - 1.0
    x = np.repeat(chips, samples_per_chip)[: grid.num_samples] * math.sqrt(power_w)
    return ComplexSeries(grid, x.astype(np.complex128))


@dataclass(frozen=True)
class ReceivedSignalSpec:
    jammer: Optional[JammerParams] = None
    jnr_db: float = 10.0
    snr_db: float = -20.0
    noise_power_w: float = 1.0
    seed: int = 0

    @property
    def label(self) -> str:
        return KIND_LABELS[self.jammer.kind if self.jammer is not None else "none"]


def received_components(spec: ReceivedSignalSpec, grid: SampleGrid) -> dict:
    """Return the scaled ``s``, ``j`` and ``w`` terms that make up r = s + j + w.

    Absent terms (no jammer, or ``snr_db = -inf``) are all-zero series.
    """
    noise_ss, useful_ss, jammer_ss = np.random.SeedSequence(spec.seed).spawn(3)
    zeros = ComplexSeries(grid, np.zeros(grid.num_samples, dtype=np.complex128))

    w = synthesize_awgn(grid, spec.noise_power_w, noise_ss)

    if math.isinf(spec.snr_db) and spec.snr_db < 0:
        s = zeros
    else:
        s = synthesize_useful(grid, spec.noise_power_w * 10 ** (spec.snr_db / 10), useful_ss)

    if spec.jammer is None:
        j = zeros
    else:
        raw = synthesize_jammer(spec.jammer, grid, jammer_ss)
        p = raw.mean_power()
        if not p > 0:
            raise InvalidParamsError("jammer produced no energy on this grid; cannot scale to JNR")
        target = spec.noise_power_w * 10 ** (spec.jnr_db / 10)
        j = ComplexSeries(grid, raw.samples * math.sqrt(target / p))

    return {"s": s, "j": j, "w": w}


def compose_received(spec: ReceivedSignalSpec, grid: SampleGrid) -> ComplexSeries:
    c = received_components(spec, grid)
    return ComplexSeries(grid, c["s"].samples + c["j"].samples + c["w"].samples)


# ---------------------------------------------------------------------------
# Randomized parameter draws
# ---------------------------------------------------------------------------

_INT_FIELDS = {"num_tones", "num_pulses"}


def default_ranges(kind: str, sample_rate_hz: float, num_samples: int) -> dict:
    """Per-field uniform intervals used for dataset generation.

    Ranges are expressed relative to the sample rate and record length so the
    same signatures appear at any grid scale.
    """
    fs = float(sample_rate_hz)
    dur = num_samples / fs
    if kind == "am":
        return {
            "num_tones": (1, 3),
            "power_w": (0.5, 1.0),
            "freq_hz": (-0.4 * fs, 0.4 * fs),
            "phase_rad": (0.0, 2 * math.pi),
        }
    if kind == "chirp":
        return {
            "power_w": (1.0, 1.0),
            "f_min_hz": (-0.45 * fs, -0.1 * fs),
            "f_max_hz": (0.1 * fs, 0.45 * fs),
            "sweep_period_s": (dur / 8, dur / 2),
            "direction": (-1, 1),
            "phase_rad": (0.0, 2 * math.pi),
        }
    if kind == "fm":
        return {
            "num_tones": (1, 1),
            "power_w": (1.0, 1.0),
            "freq_hz": (3e-4 * fs, 1e-3 * fs),
            "mod_index": (40.0, 200.0),
        }
    if kind == "dme":
        return {
            "power_w": (1.0, 1.0),
            "duty_cycle": (0.1, 0.3),
            "num_pulses": (1, 2),
            "rep_freq_hz": (fs / 2000, fs / 500),
            "carrier_hz": (-0.4 * fs, 0.4 * fs),
        }
    if kind == "nb":
        return {
            "power_w": (1.0, 1.0),
            "center_hz": (0.05 * fs, 0.4 * fs),
            "mod_index": (0.1 * fs, 0.4 * fs),
            "process_sigma": (1.0, 1.0),
            "phase_rad": (0.0, 2 * math.pi),
        }
    raise InvalidParamsError(f"unknown jammer kind {kind!r}")


def sample_jammer_params(kind: str, ranges: Mapping, seed: SeedLike) -> JammerParams:
    """Draw one parameter set for ``kind``, each field uniform over its interval.

    Integer-valued fields (tone / pulse counts) are drawn inclusively. The
    chirp ``direction`` field maps the sign of a uniform draw to +1/-1, and the
    chirp start frequency is placed at the end of the band the sweep begins from.
    """
    for name, (lo, hi) in ranges.items():
        if lo > hi:
            raise InvalidParamsError(f"empty interval for {name}: [{lo}, {hi}]")
    rng = np.random.default_rng(seed)

    def draw(name):
        lo, hi = ranges[name]
        if name in _INT_FIELDS:
            return int(rng.integers(int(lo), int(hi) + 1))
        return float(rng.uniform(lo, hi))

    if kind == "am":
        n = draw("num_tones")
        return AMParams(tuple(Tone(draw("power_w"), draw("freq_hz"), draw("phase_rad")) for _ in range(n)))
    if kind == "chirp":
        power = draw("power_w")
        a, b = sorted((draw("f_min_hz"), draw("f_max_hz")))
        period = draw("sweep_period_s")
        direction = 1 if draw("direction") >= 0 else -1
        phase = draw("phase_rad")
        start = a if direction == 1 else b
        return ChirpParams(power, start, a, b, period, direction, phase)
    if kind == "fm":
        n = draw("num_tones")
        return FMParams(tuple(FMTone(draw("power_w"), draw("freq_hz"), draw("mod_index")) for _ in range(n)))
    if kind == "dme":
        power = draw("power_w")
        duty = draw("duty_cycle")
        n = draw("num_pulses")
        return DMEParams(power, duty, tuple(PulseTrain(draw("rep_freq_hz"), draw("carrier_hz")) for _ in range(n)))
    if kind == "nb":
        return NBParams(draw("power_w"), draw("center_hz"), draw("mod_index"), draw("process_sigma"), draw("phase_rad"))
    raise InvalidParamsError(f"unknown jammer kind {kind!r}")


# ---------------------------------------------------------------------------
# IQ file format
# ---------------------------------------------------------------------------


def write_iq(path: Union[str, Path], series: ComplexSeries) -> None:
    """Write a 16-byte JFIQ header followed by interleaved float32 I/Q."""
    iq = np.empty(2 * series.grid.num_samples, dtype="<f4")
    iq[0::2] = series.samples.real
    iq[1::2] = series.samples.imag
    with open(path, "wb") as fh:
        fh.write(_IQ_HEADER.pack(IQ_MAGIC, IQ_VERSION, 0, float(series.grid.sample_rate_hz)))
        fh.write(iq.tobytes())


def read_iq(path: Union[str, Path]) -> ComplexSeries:
    raw = Path(path).read_bytes()
    if len(raw) < _IQ_HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, version, _reserved, fs = _IQ_HEADER.unpack_from(raw)
    if magic != IQ_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != IQ_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    body = raw[_IQ_HEADER.size :]
    if len(body) % 8:
        raise FormatError(f"{path}: payload is not a whole number of I/Q pairs")
    iq = np.frombuffer(body, dtype="<f4").astype(np.float64)
    samples = iq[0::2] + 1j * iq[1::2]
    return ComplexSeries(SampleGrid(fs, len(samples)), samples)
