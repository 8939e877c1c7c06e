"""Pixel-art supervision targets, generated in-process or loaded from disk.

A PixelArtView is a low-resolution cell image: one RGBA sample per cell of
cell_size x cell_size rendered pixels. The alpha channel is a binary
background mask (True/1 = background), matching the mask convention of the
alpha loss.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .geometry import ViewRaster

# A cell is background when the mesh covers less than half of its pixels.
COVERAGE_THRESHOLD = 0.5
# Per-channel ranges narrower than this skip the contrast stretch (flat channel).
_STRETCH_EPS = 1e-6


@dataclass(frozen=True)
class PixelArtView:
    """rgb: (h, w, 3) float in [0,1]; alpha: (h, w) bool, True marks background."""

    rgb: np.ndarray
    alpha: np.ndarray
    cell_size: int

    def __post_init__(self):
        rgb = np.ascontiguousarray(self.rgb, dtype=np.float64)
        alpha = np.ascontiguousarray(self.alpha, dtype=bool)
        if rgb.ndim != 3 or rgb.shape[2] != 3 or alpha.shape != rgb.shape[:2]:
            raise ValueError("rgb must be (h, w, 3) with matching alpha (h, w)")
        if self.cell_size < 1:
            raise ValueError("cell_size must be >= 1")
        rgb.flags.writeable = False
        alpha.flags.writeable = False
        object.__setattr__(self, "rgb", rgb)
        object.__setattr__(self, "alpha", alpha)

    @property
    def shape(self) -> tuple[int, int]:
        return self.rgb.shape[:2]

    @property
    def foreground(self) -> np.ndarray:
        return ~self.alpha

    def foreground_colors(self) -> np.ndarray:
        """(N, 3) colors of foreground cells, row-major order."""
        return self.rgb[self.foreground]

    def save_png(self, path: str | Path) -> None:
        """Write as RGBA PNG (foreground opaque, background transparent)."""
        rgba = np.zeros((*self.shape, 4), dtype=np.uint8)
        rgba[..., :3] = np.round(self.rgb * 255.0).astype(np.uint8)
        rgba[..., 3] = np.where(self.alpha, 0, 255)
        Image.fromarray(rgba, "RGBA").save(str(path))


def generate_standin(
    raster: ViewRaster,
    cell_size: int,
    palette: np.ndarray | None = None,
) -> PixelArtView:
    """Collapse a rasterized view into pixel-art cells.

    Each cell averages the colors of its covered pixels; cells under the
    coverage threshold become background. When a palette is supplied, the
    foreground colors get a per-channel min-max contrast stretch and are then
    snapped to the nearest palette entry (plain Euclidean RGB, ties to the
    lowest index).
    """
    H, W = raster.coverage.shape
    if H % cell_size or W % cell_size:
        raise ValueError("raster dims must be divisible by cell_size")
    h, w = H // cell_size, W // cell_size

    cov = raster.coverage.reshape(h, cell_size, w, cell_size)
    col = raster.color.reshape(h, cell_size, w, cell_size, 3)
    frac = cov.mean(axis=(1, 3))
    counts = cov.sum(axis=(1, 3))
    sums = (col * cov[..., None]).sum(axis=(1, 3))
    bg = frac < COVERAGE_THRESHOLD
    rgb = np.zeros((h, w, 3), dtype=np.float64)
    fg = ~bg
    safe = np.maximum(counts, 1)[..., None]
    means = sums / safe
    rgb[fg] = means[fg]

    if palette is not None and fg.any():
        rgb = rgb.copy()
        rgb[fg] = _stretch_and_snap(rgb[fg], np.asarray(palette, dtype=np.float64))

    return PixelArtView(rgb=rgb, alpha=bg, cell_size=cell_size)


def _stretch_and_snap(colors: np.ndarray, palette: np.ndarray) -> np.ndarray:
    lo = colors.min(axis=0)
    hi = colors.max(axis=0)
    span = hi - lo
    stretch = np.where(span > _STRETCH_EPS, (colors - lo) / np.where(span > 0, span, 1.0), colors)
    d2 = ((stretch[:, None, :] - palette[None, :, :]) ** 2).sum(axis=2)
    return palette[np.argmin(d2, axis=1)]


def load_external(path: str | Path, cell_size: int) -> PixelArtView:
    """Load one pixel-art PNG whose pixels are cell_size-aligned blocks.

    The file must carry an alpha channel; each cell is read from its top-left
    corner texel. Cells whose pixels disagree with that texel trigger a single
    warning (the corner still wins).
    """
    path = Path(path)
    img = Image.open(str(path))
    if img.mode != "RGBA":
        if "A" not in img.getbands():
            raise ValueError(f"{path.name}: pixel art needs an alpha channel")
        img = img.convert("RGBA")
    arr = np.asarray(img, dtype=np.uint8)
    H, W = arr.shape[:2]
    if H % cell_size or W % cell_size:
        raise ValueError(f"{path.name}: image dims {W}x{H} not divisible by cell_size {cell_size}")
    h, w = H // cell_size, W // cell_size
    cells = arr.reshape(h, cell_size, w, cell_size, 4)
    corner = cells[:, 0, :, 0, :]
    mismatch = (cells != corner[:, None, :, None, :]).any(axis=(1, 3, 4))
    if mismatch.any():
        warnings.warn(
            f"{path.name}: {int(mismatch.sum())} cell(s) not uniform; using corner texels",
            stacklevel=2,
        )
    rgb = corner[..., :3].astype(np.float64) / 255.0
    bg = corner[..., 3] < 128  # PNG alpha: transparent = background
    rgb = np.where(bg[..., None], 0.0, rgb)
    return PixelArtView(rgb=rgb, alpha=bg, cell_size=cell_size)
