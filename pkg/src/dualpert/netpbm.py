"""Binary PGM (P5) and PPM (P6) writers, maxval 255."""

from __future__ import annotations

from pathlib import Path

import numpy as np

__all__ = ["write_pgm", "write_ppm"]


def write_pgm(path, gray: np.ndarray) -> None:
    gray = np.asarray(gray)
    if gray.ndim != 2 or gray.dtype != np.uint8:
        raise ValueError(f"PGM needs a 2D uint8 array, got {gray.shape} {gray.dtype}")
    h, w = gray.shape
    header = f"P5\n{w} {h}\n255\n".encode("ascii")
    Path(path).write_bytes(header + gray.tobytes())


def write_ppm(path, rgb: np.ndarray) -> None:
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3 or rgb.dtype != np.uint8:
        raise ValueError(f"PPM needs an HxWx3 uint8 array, got {rgb.shape} {rgb.dtype}")
    h, w, _ = rgb.shape
    header = f"P6\n{w} {h}\n255\n".encode("ascii")
    Path(path).write_bytes(header + rgb.tobytes())
