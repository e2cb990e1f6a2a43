"""STFT spectrograms rendered as binarized images for the classifier."""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import FormatError, InsufficientInputError, InvalidParamsError
from .signals import ComplexSeries

CLASS_LABELS = ("AM", "Chirp", "FM", "DME", "NB", "No")
IMAGE_SIZES = (512, 256, 224, 64)
DB_FLOOR = -120.0


@dataclass(frozen=True)
class StftConfig:
    window_len: int = 256
    hop: int = 64
    nfft: int = 256
    window_kind: str = "hann"

    def __post_init__(self):
        if self.window_len < 1:
            raise InvalidParamsError("window_len must be positive")
        if not 1 <= self.hop <= self.window_len:
            raise InvalidParamsError("hop must lie in [1, window_len]")
        if self.nfft < self.window_len or self.nfft & (self.nfft - 1):
            raise InvalidParamsError("nfft must be a power of two no smaller than window_len")
        if self.window_kind not in ("hann", "rectangular"):
            raise InvalidParamsError(f"unknown window kind {self.window_kind!r}")

    def window(self) -> np.ndarray:
        if self.window_kind == "rectangular":
            return np.ones(self.window_len)
        m = np.arange(self.window_len)
        # periodic Hann, so overlapped frames at hop = window_len/4 sum to a constant
        return 0.5 - 0.5 * np.cos(2 * np.pi * m / self.window_len)

    def num_frames(self, num_samples: int) -> int:
        return (num_samples - self.window_len) // self.hop + 1


@dataclass(frozen=True)
class SpectrogramImage:
    """H x W 8-bit image, frequency vertical (top = +fs/2), time horizontal.

    ``gray`` keeps the pre-binarization intensity (0..255, float) when the
    image was rendered here, so later resizing can work from it.
    """

    pixels: np.ndarray
    binary: bool
    label: Optional[str] = None
    gray: Optional[np.ndarray] = None
    binarize_pct: float = 85.0

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim != 2 or px.dtype != np.uint8:
            raise InvalidParamsError("pixels must be a 2-D uint8 array")
        if self.binary and not np.all((px == 0) | (px == 255)):
            raise InvalidParamsError("binary image holds values other than 0 and 255")
        if self.label is not None and self.label not in CLASS_LABELS:
            raise InvalidParamsError(f"unknown class label {self.label!r}")
        px.setflags(write=False)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


def stft(series: ComplexSeries, cfg: StftConfig = StftConfig()) -> np.ndarray:
    """Frames x nfft complex matrix in standard DFT bin order (DC first)."""
    x = series.samples
    if x.shape[0] < cfg.window_len:
        raise InsufficientInputError(
            f"series has {x.shape[0]} samples, one window needs {cfg.window_len}"
        )
    frames = sliding_window_view(x, cfg.window_len)[:: cfg.hop]
    return np.fft.fft(frames * cfg.window(), n=cfg.nfft, axis=1)


def _axis_weights(n_in: int, n_out: int):
    # half-pixel-centre mapping, edges clamped
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(np.intp)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    return i0, i1, frac


def bilinear_resize(a: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Separable bilinear resampling of a 2-D float array."""
    a = np.asarray(a, dtype=np.float64)
    r0, r1, fr = _axis_weights(a.shape[0], out_h)
    rows = a[r0] * (1 - fr)[:, None] + a[r1] * fr[:, None]
    c0, c1, fc = _axis_weights(a.shape[1], out_w)
    return rows[:, c0] * (1 - fc) + rows[:, c1] * fc


def binarize(gray: np.ndarray, pct: float) -> np.ndarray:
    """255 where ``gray`` exceeds its ``pct``-th percentile, else 0."""
    if not 0 <= pct <= 100:
        raise InvalidParamsError(f"binarization percentile must lie in [0, 100], got {pct}")
    thr = np.percentile(gray, pct)
    return np.where(gray > thr, 255, 0).astype(np.uint8)


def spectrogram_db(series: ComplexSeries, cfg: StftConfig = StftConfig()) -> np.ndarray:
    """nfft x frames magnitude in dB, fftshifted and flipped so row 0 is +fs/2."""
    mag = np.abs(stft(series, cfg))
    with np.errstate(divide="ignore"):
        db = 20.0 * np.log10(mag)
    db = np.maximum(db, DB_FLOOR)
    return np.fft.fftshift(db, axes=1).T[::-1]


def render_image(
    series: ComplexSeries,
    cfg: StftConfig = StftConfig(),
    out_size: int = 512,
    binarize_pct: float = 85.0,
    label: Optional[str] = None,
) -> SpectrogramImage:
    if out_size < 1:
        raise InvalidParamsError("out_size must be positive")
    if series.grid.num_samples < cfg.window_len + cfg.hop:
        raise InsufficientInputError("rendering needs at least two STFT frames")
    db = spectrogram_db(series, cfg)
    lo, hi = db.min(), db.max()
    if hi == lo:
        gray = np.zeros((out_size, out_size))
        return SpectrogramImage(np.zeros((out_size, out_size), np.uint8), True, label, gray, binarize_pct)
    norm = (db - lo) * (255.0 / (hi - lo))
    gray = bilinear_resize(norm, out_size, out_size)
    return SpectrogramImage(binarize(gray, binarize_pct), True, label, gray, binarize_pct)


def resize(img: SpectrogramImage, target: int) -> SpectrogramImage:
    if target not in IMAGE_SIZES:
        raise InvalidParamsError(f"unsupported target size {target}; choose from {IMAGE_SIZES}")
    if img.gray is not None:
        gray = bilinear_resize(img.gray, target, target)
        if img.binary:
            if np.all(gray == gray.flat[0]):
                pixels = np.zeros(gray.shape, np.uint8)
            else:
                pixels = binarize(gray, img.binarize_pct)
        else:
            pixels = np.clip(np.rint(gray), 0, 255).astype(np.uint8)
        return SpectrogramImage(pixels, img.binary, img.label, gray, img.binarize_pct)
    values = bilinear_resize(img.pixels.astype(np.float64), target, target)
    if img.binary:
        pixels = np.where(values >= 128, 255, 0).astype(np.uint8)
    else:
        pixels = np.clip(np.rint(values), 0, 255).astype(np.uint8)
    return SpectrogramImage(pixels, img.binary, img.label, None, img.binarize_pct)


def write_pgm(path: Union[str, Path], img: SpectrogramImage) -> None:
    header = f"P5\n{img.width} {img.height}\n255\n".encode("ascii")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(img.pixels).tobytes())


_PGM_HEADER = re.compile(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s")


def read_pgm_array(path: Union[str, Path]) -> np.ndarray:
    raw = Path(path).read_bytes()
    m = _PGM_HEADER.match(raw)
    if not m:
        raise FormatError(f"{path}: not a binary PGM (P5) file")
    w, h, maxval = (int(g) for g in m.groups())
    if maxval != 255:
        raise FormatError(f"{path}: maxval {maxval} unsupported (need 255)")
    body = raw[m.end() : m.end() + w * h]
    if len(body) != w * h:
        raise FormatError(f"{path}: truncated pixel data")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w)


def read_pgm(path: Union[str, Path], label: Optional[str] = None) -> SpectrogramImage:
    px = read_pgm_array(path).copy()
    binary = bool(np.all((px == 0) | (px == 255)))
    return SpectrogramImage(px, binary, label)
