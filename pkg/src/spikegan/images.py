"""Binary PPM (P6) output and simple image layouts."""

from __future__ import annotations

import os
import re

import numpy as np

from .data import denormalize


def make_grid(images: np.ndarray, rows: int, cols: int) -> np.ndarray:
    """Tile uint8 images (N, C, H, W) row by row into (C, rows*H, cols*W); spare tiles stay black."""
    N, C, H, W = images.shape
    if rows < 1 or cols < 1 or N > rows * cols:
        raise ValueError(f"{N} images do not fit a {rows}x{cols} grid")
    grid = np.zeros((C, rows * H, cols * W), dtype=np.uint8)
    for i in range(N):
        r, c = divmod(i, cols)
        grid[:, r * H:(r + 1) * H, c * W:(c + 1) * W] = images[i]
    return grid


def to_rgb(image: np.ndarray) -> np.ndarray:
    """(C, H, W) uint8 -> (H, W, 3); single-channel images are replicated."""
    if image.ndim != 3 or image.shape[0] not in (1, 3):
        raise ValueError(f"expected a (1|3, H, W) image, got {image.shape}")
    if image.shape[0] == 1:
        image = np.repeat(image, 3, axis=0)
    return np.ascontiguousarray(image.transpose(1, 2, 0), dtype=np.uint8)


def encode_ppm(image: np.ndarray) -> bytes:
    rgb = to_rgb(image)
    H, W, _ = rgb.shape
    return f"P6\n{W} {H}\n255\n".encode("ascii") + rgb.tobytes()


def write_ppm(path: str | os.PathLike, image: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_ppm(image))


def read_ppm(path: str | os.PathLike) -> np.ndarray:
    """Read a P6 file written by :func:`write_ppm`; returns (H, W, 3) uint8."""
    with open(path, "rb") as fh:
        blob = fh.read()
    # exactly one whitespace byte separates the header from the pixels
    header = re.match(rb"P6\s+(\d+)\s+(\d+)\s+255\s", blob)
    if header is None:
        raise ValueError(f"{path}: not a binary 8-bit PPM")
    W, H = int(header.group(1)), int(header.group(2))
    pixels = np.frombuffer(blob, dtype=np.uint8, offset=header.end())
    if pixels.size != H * W * 3:
        raise ValueError(f"{path}: {pixels.size} pixel bytes for {W}x{H}")
    return pixels.reshape(H, W, 3)


def sample_grid(images: np.ndarray, rows: int, cols: int) -> np.ndarray:
    """Grid of generator outputs in [-1, 1]."""
    return make_grid(denormalize(images), rows, cols)


def step_strip(x_seq: np.ndarray) -> np.ndarray:
    """Render presynaptic inputs (T, N, C, H, W) as one row per sample, one tile per step.

    Values are min-max scaled over the whole strip, since X_t has no fixed range.
    """
    steps, N, C, H, W = x_seq.shape
    lo, hi = float(x_seq.min()), float(x_seq.max())
    scaled = np.zeros(x_seq.shape) if hi <= lo else (x_seq - lo) / (hi - lo)
    tiles = np.rint(scaled * 255).astype(np.uint8)
    # (T, N, C, H, W) -> (N*T, C, H, W) in sample-major order
    return make_grid(tiles.transpose(1, 0, 2, 3, 4).reshape(N * steps, C, H, W), N, steps)
