"""Serialization of proximity matrices: delimited text and PGM heatmaps."""

from __future__ import annotations

import os

import numpy as np

from .clustering import ProximityMatrix
from .errors import DataError


def save_matrix_csv(matrix: ProximityMatrix, path: str | os.PathLike) -> None:
    """Write the matrix as comma-separated rows, full float precision."""
    np.savetxt(path, matrix.entries, fmt="%.17g", delimiter=",")


def load_matrix_csv(path: str | os.PathLike) -> ProximityMatrix:
    try:
        entries = np.loadtxt(path, delimiter=",", dtype=np.float64, ndmin=2)
    except (OSError, ValueError) as exc:
        raise DataError(f"{path}: cannot load matrix ({exc})") from None
    return ProximityMatrix(entries)


def export_heatmap(matrix: ProximityMatrix, path: str | os.PathLike) -> None:
    """Render the matrix as a binary PGM (P5) image, one pixel per entry.

    Distances map linearly to gray so the smallest distance is white (255)
    and the largest is black (0); a constant matrix comes out all white.
    """
    e = matrix.entries
    lo, hi = float(e.min()), float(e.max())
    if hi > lo:
        scaled = (e - lo) / (hi - lo)
    else:
        scaled = np.zeros_like(e)
    pixels = np.rint(255.0 * (1.0 - scaled)).astype(np.uint8)
    header = f"P5\n{e.shape[1]} {e.shape[0]}\n255\n".encode("ascii")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(pixels.tobytes())


def read_pgm(path: str | os.PathLike) -> np.ndarray:
    """Read back a binary PGM written by export_heatmap (test/debug aid)."""
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise DataError(f"{path}: cannot read ({exc})") from None
    parts = data.split(b"\n", 3)
    if len(parts) != 4 or parts[0] != b"P5":
        raise DataError(f"{path} is not a binary PGM")
    try:
        width, height = (int(tok) for tok in parts[1].split())
        maxval = int(parts[2])
        if maxval != 255:
            raise ValueError(f"unsupported maxval {maxval}")
        raster = np.frombuffer(parts[3], dtype=np.uint8, count=width * height)
    except ValueError as exc:
        raise DataError(f"{path}: malformed PGM ({exc})") from None
    return raster.reshape(height, width)
