"""Deterministic rasterization of 1-D series into 224x224 waveform images.

A series is min-max normalized, resampled to at most one point per pixel
column, and drawn as a connected one-pixel polyline (Bresenham) in stroke
value 0.0 on a white (1.0) background.  No axes, ticks, or anti-aliasing:
the images feed a model, and binary strokes keep tests exact.

Two-series overlays use one channel per series: series ``a`` keeps the red
channel at background and zeroes green/blue along its stroke (pixel value
(1,0,0)); series ``b`` keeps blue (pixel value (0,0,1)); coinciding stroke
pixels end up (0,0,0).  The composition is order-independent, so swapping
the series swaps the channel masks exactly.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DataError

RESOLUTION = 224
VERTICAL_MARGIN = 11  # 5% of 224, keeps extremes off the border
STROKE = 0.0
BACKGROUND = 1.0

SERIES_LABELS = ("fnirs-hbo", "fnirs-hbr", "video-embedding", "fnirs-embedding")


@dataclass
class Series:
    """A finite 1-D signal or embedding vector tagged with its modality."""

    values: np.ndarray
    label: str = "fnirs-hbo"

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 1 or self.values.size < 2:
            raise DataError(
                f"series must be 1-D with at least 2 samples, got shape {self.values.shape}"
            )
        if not np.all(np.isfinite(self.values)):
            raise DataError("series contains NaN or Inf values")
        if self.label not in SERIES_LABELS:
            raise DataError(f"unknown series label {self.label!r}")


@dataclass
class WaveformImage:
    """Channel-first raster, 1 channel (single series) or 3 (overlay)."""

    pixels: np.ndarray

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        if self.pixels.ndim != 3 or self.pixels.shape[0] not in (1, 3):
            raise DataError(f"expected [1|3, H, W] pixels, got {self.pixels.shape}")
        if self.pixels.shape[1:] != (RESOLUTION, RESOLUTION):
            raise DataError(
                f"waveform images are {RESOLUTION}x{RESOLUTION}, got {self.pixels.shape[1:]}"
            )

    @property
    def channels(self) -> int:
        return self.pixels.shape[0]

    def to_uint8(self) -> np.ndarray:
        return np.clip(np.rint(self.pixels * 255.0), 0, 255).astype(np.uint8)

    def write_png(self, path) -> None:
        arr = self.to_uint8()
        if self.channels == 1:
            img = Image.fromarray(arr[0], mode="L")
        else:
            img = Image.fromarray(arr.transpose(1, 2, 0), mode="RGB")
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        img.save(path, format="PNG")

    def write_text(self, path) -> None:
        """Portable text grid for golden-file diffing: one row per line."""
        arr = self.to_uint8()
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as fh:
            fh.write(f"{arr.shape[0]} {arr.shape[1]} {arr.shape[2]}\n")
            for channel in arr:
                for row in channel:
                    fh.write(" ".join(str(v) for v in row))
                    fh.write("\n")

    @staticmethod
    def read_text(path) -> "WaveformImage":
        with open(path) as fh:
            c, h, w = (int(v) for v in fh.readline().split())
            flat = np.array([int(v) for line in fh for v in line.split()], dtype=np.float64)
        return WaveformImage(flat.reshape(c, h, w) / 255.0)


def normalize_series(series: Series) -> Series:
    """Affine min-max map onto [0, 1]; a constant series maps to all 0.5."""
    values = series.values
    lo, hi = values.min(), values.max()
    if hi == lo:
        normalized = np.full_like(values, 0.5)
    else:
        normalized = (values - lo) / (hi - lo)
    return Series(normalized, series.label)


def resample(values: np.ndarray, points: int = RESOLUTION) -> np.ndarray:
    """Piecewise-linear resampling; series at or under ``points`` pass through."""
    n = values.size
    if n <= points:
        return values
    positions = np.linspace(0.0, n - 1.0, points)
    return np.interp(positions, np.arange(n), values)


def _bresenham(x0: int, y0: int, x1: int, y1: int):
    """Integer line pixels from (x0, y0) to (x1, y1), endpoints included."""
    dx = abs(x1 - x0)
    dy = -abs(y1 - y0)
    sx = 1 if x0 < x1 else -1
    sy = 1 if y0 < y1 else -1
    err = dx + dy
    x, y = x0, y0
    while True:
        yield x, y
        if x == x1 and y == y1:
            return
        doubled = 2 * err
        if doubled >= dy:
            err += dy
            x += sx
        if doubled <= dx:
            err += dx
            y += sy


def stroke_mask(series: Series) -> np.ndarray:
    """Boolean [H, W] mask of the polyline pixels for a normalized raster."""
    normalized = normalize_series(series)
    values = resample(normalized.values)
    n = values.size
    xs = np.rint(np.arange(n) * (RESOLUTION - 1) / (n - 1)).astype(int)
    low, high = VERTICAL_MARGIN, RESOLUTION - 1 - VERTICAL_MARGIN
    ys = np.rint(high - values * (high - low)).astype(int)
    mask = np.zeros((RESOLUTION, RESOLUTION), dtype=bool)
    for i in range(n - 1):
        for x, y in _bresenham(int(xs[i]), int(ys[i]), int(xs[i + 1]), int(ys[i + 1])):
            mask[y, x] = True
    return mask


def render(series: Series) -> WaveformImage:
    """Single-series grayscale diagram: stroke 0.0 on background 1.0."""
    canvas = np.full((1, RESOLUTION, RESOLUTION), BACKGROUND)
    canvas[0][stroke_mask(series)] = STROKE
    return WaveformImage(canvas)


def render_single_diagram(a: Series, b: Series) -> WaveformImage:
    """Two independently normalized series on one three-channel canvas.

    Pixels on only ``a``'s stroke read (1,0,0), only ``b``'s read (0,0,1),
    and coinciding pixels read (0,0,0); the green channel marks the union.
    """
    mask_a = stroke_mask(a)
    mask_b = stroke_mask(b)
    canvas = np.full((3, RESOLUTION, RESOLUTION), BACKGROUND)
    canvas[0][mask_b] = STROKE
    canvas[1][mask_a | mask_b] = STROKE
    canvas[2][mask_a] = STROKE
    return WaveformImage(canvas)


def series_from_vector(vector: np.ndarray, label: str) -> Series:
    """Wrap an embedding vector for rendering through the same pipeline."""
    return Series(np.asarray(vector, dtype=np.float64), label)
