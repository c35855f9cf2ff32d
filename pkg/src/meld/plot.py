"""Plain-file visual outputs: mel heatmaps as binary PGM, loss curves as CSV."""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .errors import EmptyInputError


def mel_to_gray(frames, lo: float | None = None, hi: float | None = None) -> np.ndarray:
    """Map a (T, D) mel to uint8 rows = time, cols = mel bin.

    A constant input maps to mid-gray (128) everywhere.
    """
    x = np.asarray(frames, dtype=np.float64)
    if x.ndim != 2 or x.size == 0:
        raise EmptyInputError("mel must be a non-empty (T, D) matrix")
    lo = float(x.min()) if lo is None else lo
    hi = float(x.max()) if hi is None else hi
    if hi <= lo:
        return np.full(x.shape, 128, dtype=np.uint8)
    return np.clip(np.round((x - lo) / (hi - lo) * 255.0), 0, 255).astype(np.uint8)


def write_pgm(path, image: np.ndarray) -> Path:
    path = Path(path)
    h, w = image.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(np.ascontiguousarray(image, dtype=np.uint8).tobytes())
    return path


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    # header is exactly three newline-terminated lines as written by write_pgm
    magic, dims, _maxval, body = raw.split(b"\n", 3)
    if magic != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h = (int(v) for v in dims.split())
    return np.frombuffer(body[: w * h], dtype=np.uint8).reshape(h, w)


def loss_csv(log_path, out_path, columns=("step", "mode", "weighted_total", "kl_term", "reconstruction_mse", "stt_ce", "slowness", "lr")) -> Path:
    """Copy selected columns of a training log to a compact CSV."""
    with open(log_path, newline="") as f:
        rows = list(csv.DictReader(f))
    if not rows:
        raise EmptyInputError(f"{log_path}: training log has no rows")
    out_path = Path(out_path)
    with open(out_path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(columns)
        for r in rows:
            w.writerow([r[c] for c in columns])
    return out_path
