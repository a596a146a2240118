"""Overlapped-grid division of a square image into h×h patches."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class GridGeometry:
    d: int  # image side
    h: int  # patch side
    ov: int  # overlap between neighbouring windows
    positions: tuple  # window offsets along each axis, strictly increasing

    @property
    def stride(self) -> int:
        return self.h - self.ov

    @property
    def s(self) -> int:
        return len(self.positions)

    @property
    def n_patches(self) -> int:
        return self.s * self.s

    def windows(self):
        """Yield ``(row, col, y0, x0)`` for every window."""
        for r, y0 in enumerate(self.positions):
            for c, x0 in enumerate(self.positions):
                yield r, c, y0, x0

    def coverage(self) -> np.ndarray:
        """Per-axis count of windows covering each pixel index."""
        cover = np.zeros(self.d, dtype=int)
        for p in self.positions:
            cover[p:p + self.h] += 1
        return cover


def grid_positions(d: int, h: int, ov: int) -> GridGeometry:
    """Regular offsets ``0, t, 2t, ...`` with ``t = h - ov``, plus ``d - h`` when not reached.

    The realised window count per axis is ``floor((d - h) / t) + 1``, or one
    more when the clamped final window is needed for full coverage.
    """
    if not 0 <= ov < h:
        raise ValueError(f"overlap must satisfy 0 <= ov < h, got ov={ov}, h={h}")
    if h > d:
        raise ValueError(f"patch side {h} exceeds image side {d}")
    t = h - ov
    positions = list(range(0, d - h + 1, t))
    if positions[-1] != d - h:
        positions.append(d - h)
    return GridGeometry(d, h, ov, tuple(positions))


@dataclass
class PatchSet:
    patches: np.ndarray  # (s*s, C, h, h), row-major over the grid
    geometry: GridGeometry
    index: list  # (row, col) of each patch

    def __len__(self):
        return len(self.patches)


def extract_patches(image, geometry: GridGeometry) -> PatchSet:
    """Crop every window from a C×d×d (or d×d) image."""
    img = np.asarray(image)
    if img.shape[-1] != geometry.d or img.shape[-2] != geometry.d:
        raise ValueError(f"image side {img.shape[-2:]} does not match geometry d={geometry.d}")
    h = geometry.h
    patches, index = [], []
    for r, c, y0, x0 in geometry.windows():
        patches.append(img[..., y0:y0 + h, x0:x0 + h])
        index.append((r, c))
    return PatchSet(np.stack(patches), geometry, index)


def paste_patches(patch_set: PatchSet) -> np.ndarray:
    """Inverse of :func:`extract_patches` for patches cut from one image."""
    g = patch_set.geometry
    first = patch_set.patches[0]
    out = np.zeros(first.shape[:-2] + (g.d, g.d), dtype=first.dtype)
    for patch, (r, c) in zip(patch_set.patches, patch_set.index):
        y0, x0 = g.positions[r], g.positions[c]
        out[..., y0:y0 + g.h, x0:x0 + g.h] = patch
    return out
