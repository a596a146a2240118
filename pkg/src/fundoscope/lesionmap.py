"""Label/probability maps from the local network and the weighting matrix they induce."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .networks import infer_patches
from .tiling import GridGeometry, PatchSet


@dataclass
class LesionMaps:
    L: np.ndarray  # s×s predicted lesion class
    P: np.ndarray  # s×s winning softmax probability
    LP: np.ndarray  # (L + 1) * P
    M: np.ndarray  # d×d weighting matrix
    geometry: GridGeometry


@dataclass
class WeightedImage:
    pixels: np.ndarray  # C×d×d, real valued, not clamped
    source_id: str = ""

    def display(self) -> np.ndarray:
        """uint8 rendering rescaled by the image maximum (display only)."""
        peak = float(self.pixels.max())
        scale = 255.0 / peak if peak > 0 else 0.0
        return np.clip(np.rint(self.pixels * scale), 0, 255).astype(np.uint8)


def predict_maps(local_network, patch_set: PatchSet, batch_size=256):
    """Per-patch argmax class ``L`` and max probability ``P`` laid out on the grid."""
    if local_network.output_dim != 4:
        raise ValueError(f"local network must output 4 classes, got {local_network.output_dim}")
    g = patch_set.geometry
    if len(patch_set) != g.n_patches:
        raise ValueError(f"{len(patch_set)} patches for a {g.s}x{g.s} grid")
    labels, probs, _ = infer_patches(local_network, patch_set.patches, batch_size)
    L = np.zeros((g.s, g.s), dtype=np.int64)
    P = np.zeros((g.s, g.s))
    for (r, c), lab, p in zip(patch_set.index, labels, probs):
        L[r, c], P[r, c] = lab, p
    return L, P


def fuse(L, P):
    """``LP = (L + 1) * P`` elementwise."""
    L, P = np.asarray(L), np.asarray(P, dtype=float)
    if L.shape != P.shape:
        raise ValueError(f"label map {L.shape} and probability map {P.shape} differ")
    return (L + 1) * P


def expand_and_tile(LP, geometry: GridGeometry):
    """Broadcast each LP entry over its h×h window; overlaps take the mean of all covering windows."""
    LP = np.asarray(LP, dtype=float)
    if LP.shape != (geometry.s, geometry.s):
        raise ValueError(f"LP shape {LP.shape} does not match a {geometry.s}x{geometry.s} grid")
    total = np.zeros((geometry.d, geometry.d))
    count = np.zeros((geometry.d, geometry.d))
    h = geometry.h
    for r, c, y0, x0 in geometry.windows():
        total[y0:y0 + h, x0:x0 + h] += LP[r, c]
        count[y0:y0 + h, x0:x0 + h] += 1
    if (count == 0).any():
        raise ValueError("grid leaves pixels uncovered")
    return total / count


def apply_weight(image, M, source_id="") -> WeightedImage:
    """``I* = M * I`` per channel, kept real valued."""
    img = np.asarray(image, dtype=float)
    M = np.asarray(M, dtype=float)
    if img.shape[-2:] != M.shape:
        raise ValueError(f"image {img.shape} and weighting matrix {M.shape} differ spatially")
    if (M <= 0).any():
        raise ValueError("weighting matrix entries must be positive")
    return WeightedImage(img * M, source_id)


def build_maps(local_network, patch_set: PatchSet, batch_size=256) -> LesionMaps:
    L, P = predict_maps(local_network, patch_set, batch_size)
    LP = fuse(L, P)
    return LesionMaps(L, P, LP, expand_and_tile(LP, patch_set.geometry), patch_set.geometry)
