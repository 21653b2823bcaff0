#!/usr/bin/env python3
"""Plain-data exports: CSV grids, PGM heatmaps, histograms and reports."""

import math
from pathlib import Path

import numpy as np

from pcgp import common as rc
from pcgp.config import parse_config_text

CSV_FORMAT = "%.17g"


def write_csv_grid(path: str | Path, array) -> None:
    """One CSV row per grid row, 17 significant digits."""
    arr = np.atleast_2d(np.asarray(array, dtype=np.float64))
    if arr.ndim != 2:
        raise rc.InputError(f"CSV grids must be 2-D, got shape {arr.shape}")
    np.savetxt(path, arr, fmt=CSV_FORMAT, delimiter=",")


def read_csv_grid(path: str | Path) -> np.ndarray:
    try:
        arr = np.loadtxt(path, delimiter=",", dtype=np.float64, ndmin=2)
    except ValueError as exc:
        raise rc.InputError(f"{path}: not a numeric CSV grid ({exc})") from None
    if arr.size == 0:
        raise rc.InputError(f"{path}: CSV grid is empty")
    return arr


def write_pgm(path: str | Path, array) -> tuple[float, float]:
    """Binary 8-bit PGM with linear min-max scaling; returns (lo, hi).

    Row 0 of the array is written first. A constant array maps to 0.
    """
    arr = np.asarray(array, dtype=np.float64)
    if arr.ndim != 2 or not np.all(np.isfinite(arr)):
        raise rc.InputError("heatmaps need a finite 2-D array")
    lo, hi = float(arr.min()), float(arr.max())
    if hi > lo:
        pixels = np.rint((arr - lo) / (hi - lo) * 255.0)
    else:
        pixels = np.zeros_like(arr)
    rows, cols = arr.shape
    header = f"P5\n{cols} {rows}\n255\n".encode("ascii")
    Path(path).write_bytes(header + pixels.astype(np.uint8).tobytes())
    return lo, hi


def read_pgm(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(maxsplit=4)
    if len(parts) < 5 or parts[0] != b"P5":
        raise rc.FormatError("not a binary PGM file", 0, str(path))
    cols, rows, depth = int(parts[1]), int(parts[2]), int(parts[3])
    if depth != 255:
        raise rc.FormatError(f"unsupported PGM depth {depth}", 0, str(path))
    pixels = data[len(data) - rows * cols:]
    return np.frombuffer(pixels, dtype=np.uint8).reshape(rows, cols)


def write_scaling_sidecar(path: str | Path, entries: dict[str, tuple[float, float]]) -> None:
    """``name,lo,hi`` per heatmap so pixel values map back to field values."""
    lines = ["image,lo,hi"]
    lines.extend(f"{name},{lo:.17g},{hi:.17g}" for name, (lo, hi) in entries.items())
    Path(path).write_text("\n".join(lines) + "\n")


def histogram(predicted, reference, bins: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Counts of both samples over shared edges spanning their union."""
    predicted = np.asarray(predicted, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    both = np.concatenate([predicted, reference])
    lo, hi = float(both.min()), float(both.max())
    if hi <= lo:
        lo, hi = lo - 0.5, hi + 0.5
    edges = np.linspace(lo, hi, bins + 1)
    return edges, np.histogram(predicted, edges)[0], np.histogram(reference, edges)[0]


def write_histogram_csv(path: str | Path, edges, predicted, reference) -> None:
    edges = np.asarray(edges, dtype=np.float64)
    predicted = np.asarray(predicted)
    reference = np.asarray(reference)
    if not len(edges) == len(predicted) + 1 == len(reference) + 1:
        raise rc.InputError("histogram needs one more edge than counts")
    lines = ["bin_lo,bin_hi,predicted,reference"]
    for k in range(len(predicted)):
        lines.append(f"{edges[k]:.17g},{edges[k + 1]:.17g},{int(predicted[k])},{int(reference[k])}")
    Path(path).write_text("\n".join(lines) + "\n")


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (float, np.floating)):
        value = float(value)
        return repr(value) if math.isfinite(value) else str(value).lower()
    return str(value)


def write_report(path: str | Path, mapping: dict) -> None:
    lines = [f"{key} = {_format_value(value)}" for key, value in mapping.items()]
    Path(path).write_text("\n".join(lines) + "\n")


def read_report(path: str | Path) -> dict[str, str]:
    return parse_config_text(Path(path).read_text())
