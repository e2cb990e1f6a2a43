"""Static SVG figures: accuracy curves, C/N0 bars and partition histograms.

Figures are built on bare ``Figure`` objects (no pyplot state), and SVG
output is made reproducible by pinning the hash salt and dropping the date
stamp, so identical inputs give identical bytes.
"""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Sequence, Union

import matplotlib

matplotlib.use("Agg")
import numpy as np
from matplotlib.figure import Figure

from .errors import FormatError, InvalidParamsError
from .spectrogram import CLASS_LABELS

PLOT_KINDS = ("accuracy_curve", "cn0_bars")

_STYLE = {
    "svg.hashsalt": "jamfed",
    "svg.fonttype": "path",
    "font.size": 10,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "axes.spines.top": False,
    "axes.spines.right": False,
}


def read_numeric_csv(path: Union[str, Path], required: Sequence[str]) -> dict:
    """Columns of a CSV as float arrays; non-numeric columns kept as strings.

    Raises ``FormatError`` naming the file and line of the first bad row.
    """
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise FormatError(f"{path}:1: empty file") from None
        missing = [c for c in required if c not in header]
        if missing:
            raise FormatError(f"{path}:1: missing column(s) {missing}")
        cols = {h: [] for h in header}
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise FormatError(f"{path}:{lineno}: expected {len(header)} fields, found {len(row)}")
            for h, v in zip(header, row):
                if h in required:
                    try:
                        v = float(v)
                    except ValueError:
                        raise FormatError(f"{path}:{lineno}: column {h!r} value {v!r} is not numeric") from None
                cols[h].append(v)
    return {h: (np.asarray(v, dtype=np.float64) if h in required else v) for h, v in cols.items()}


def _save(fig: Figure, out: Union[str, Path]) -> Path:
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out, format="svg", metadata={"Date": None})
    return out


def accuracy_curve(csv_paths: Sequence[Union[str, Path]], out: Union[str, Path], title: str = "") -> Path:
    """Test accuracy against round, one line per metrics CSV."""
    with matplotlib.rc_context(_STYLE):
        fig = Figure(figsize=(6.4, 4.0))
        ax = fig.add_subplot()
        for i, p in enumerate(csv_paths):
            data = read_numeric_csv(p, ("round", "test_accuracy"))
            (line,) = ax.plot(data["round"], 100.0 * data["test_accuracy"], marker="o", markersize=3, label=Path(p).stem)
            line.set_gid(f"series-{i}")
        ax.set_xlabel("round")
        ax.set_ylabel("test accuracy (%)")
        ax.set_ylim(0, 100)
        if title:
            ax.set_title(title)
        ax.legend(loc="lower right", frameon=False)
        fig.tight_layout()
        return _save(fig, out)


def cn0_bars(csv_paths: Sequence[Union[str, Path]], out: Union[str, Path], column: str = "mean_event_cn0_dbhz") -> Path:
    """Grouped bars of per-zone C/N0, one bar series per report CSV."""
    with matplotlib.rc_context(_STYLE):
        fig = Figure(figsize=(6.4, 4.0))
        ax = fig.add_subplot()
        n = len(csv_paths)
        width = 0.8 / n
        lo = np.inf
        for i, p in enumerate(csv_paths):
            data = read_numeric_csv(p, ("zone", column))
            x = data["zone"] + (i - (n - 1) / 2) * width
            bars = ax.bar(x, data[column], width=width, label=Path(p).stem)
            for j, patch in enumerate(bars):
                patch.set_gid(f"series-{i}-bar-{j}")
            lo = min(lo, float(data[column].min()) if len(data[column]) else lo)
        ax.set_xlabel("zone")
        ax.set_ylabel("C/N0 (dB-Hz)")
        if np.isfinite(lo):
            ax.set_ylim(max(0.0, lo - 5.0), None)
        ax.legend(loc="lower right", frameon=False)
        fig.tight_layout()
        return _save(fig, out)


def emit_plot(csv_paths: Sequence[Union[str, Path]], kind: str, out: Union[str, Path]) -> Path:
    if not csv_paths:
        raise InvalidParamsError("at least one CSV is required")
    if kind == "accuracy_curve":
        return accuracy_curve(csv_paths, out)
    if kind == "cn0_bars":
        return cn0_bars(csv_paths, out)
    raise InvalidParamsError(f"plot kind must be one of {PLOT_KINDS}, got {kind!r}")


def partition_bars(class_matrix: np.ndarray, out: Union[str, Path], title: str = "") -> Path:
    """Stacked per-client class counts."""
    mat = np.asarray(class_matrix)
    with matplotlib.rc_context(_STYLE):
        fig = Figure(figsize=(6.4, 4.0))
        ax = fig.add_subplot()
        bottom = np.zeros(mat.shape[0])
        clients = np.arange(mat.shape[0])
        for c in range(mat.shape[1]):
            ax.bar(clients, mat[:, c], bottom=bottom, label=CLASS_LABELS[c])
            bottom += mat[:, c]
        ax.set_xticks(clients)
        ax.set_xlabel("client")
        ax.set_ylabel("samples")
        if title:
            ax.set_title(title)
        ax.legend(ncols=3, frameon=False, fontsize=8)
        fig.tight_layout()
        return _save(fig, out)
