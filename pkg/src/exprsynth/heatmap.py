"""Gaussian landmark heatmaps used as the generators' geometry condition."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .shape_model import LandmarkSet

DEFAULT_SIGMA_AT_128 = 2.0
TRUNCATE = 3.0


def default_sigma(size: int) -> float:
    """Sigma scaled from 2 px at 128x128 to the given resolution."""
    return DEFAULT_SIGMA_AT_128 * size / 128.0


def render_heatmap(
    landmarks: LandmarkSet,
    height: int,
    width: int,
    sigma: float,
    mode: str = "per-point",
) -> np.ndarray:
    """Render unit-peak Gaussians at pixel centers.

    Pixel ``(row, col)`` has center ``(x, y) = (col, row)``.  Values at a
    distance greater than ``3 * sigma`` from the landmark are zero.  Returns
    ``(K, H, W)`` for ``mode="per-point"`` and ``(1, H, W)`` for
    ``mode="aggregated"`` (the per-pixel max over points).
    """
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    if height < 1 or width < 1:
        raise ValueError(f"heatmap dimensions must be positive, got {height}x{width}")
    if mode not in ("per-point", "aggregated"):
        raise ValueError(f"unknown heatmap mode {mode!r}")
    pts = landmarks.points
    dx2 = (np.arange(width)[None, :] - pts[:, 0:1]) ** 2  # (K, W)
    dy2 = (np.arange(height)[None, :] - pts[:, 1:2]) ** 2  # (K, H)
    d2 = dy2[:, :, None] + dx2[:, None, :]
    maps = np.where(d2 <= (TRUNCATE * sigma) ** 2, np.exp(-d2 / (2.0 * sigma * sigma)), 0.0)
    if mode == "aggregated":
        return maps.max(axis=0, keepdims=True)
    return maps


def crop_heatmap_coords(landmarks: LandmarkSet, crop_offset: tuple[float, float]) -> LandmarkSet:
    dx, dy = crop_offset
    return landmarks.translated(-dx, -dy)


def heatmap_peaks(maps: np.ndarray) -> np.ndarray:
    """(x, y) of each channel's argmax; rows of NaN for all-zero channels."""
    k, h, w = maps.shape
    flat = maps.reshape(k, -1)
    idx = flat.argmax(axis=1)
    out = np.column_stack([idx % w, idx // w]).astype(np.float64)
    out[flat.max(axis=1) <= 0] = np.nan
    return out


def to_uint8(values: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(values) * 255.0), 0, 255).astype(np.uint8)


def export_heatmap(maps: np.ndarray, out_dir, prefix: str = "heatmap") -> list[Path]:
    """Write one 8-bit grayscale image per channel plus an aggregated preview."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for k, channel in enumerate(maps):
        path = out_dir / f"{prefix}_{k:02d}.pgm"
        Image.fromarray(to_uint8(channel)).save(path)
        paths.append(path)
    preview = out_dir / f"{prefix}_preview.pgm"
    Image.fromarray(to_uint8(maps.max(axis=0))).save(preview)
    paths.append(preview)
    return paths
