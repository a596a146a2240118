"""Contrast enhancement, circular ROI extraction and aspect-preserving resize."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from PIL import Image
from scipy import ndimage


class NotAFundusError(ValueError):
    """The image has no usable bright fundus region."""


@dataclass
class PreprocessParams:
    alpha: float = 4.0
    beta: float = -4.0
    gamma: float = 128.0
    theta: float = 10.0  # Gaussian scale, pixels
    kernel_radius: int | None = None  # default ceil(3 * theta)
    roi_threshold: float = 15 / 255  # fraction of the brightest channel mean
    min_roi_fraction: float = 0.01

    def __post_init__(self):
        if self.theta <= 0:
            raise ValueError("theta must be positive")
        if self.kernel_radius is None:
            self.kernel_radius = math.ceil(3 * self.theta)
        if self.kernel_radius < 1:
            raise ValueError("kernel_radius must be >= 1")


@dataclass
class FundusImage:
    pixels: np.ndarray  # C×H×W in [0, 255]
    roi_mask: np.ndarray  # H×W bool
    meta: dict = field(default_factory=dict)


def gaussian_kernel(theta, radius):
    """(2r+1)×(2r+1) kernel ∝ exp(-(x²+y²)/(2θ²)) summing to one."""
    if theta <= 0:
        raise ValueError("theta must be positive")
    g = gaussian_kernel_1d(theta, radius)
    return np.outer(g, g)


def gaussian_kernel_1d(theta, radius):
    x = np.arange(-radius, radius + 1, dtype=float)
    g = np.exp(-(x * x) / (2 * theta * theta))
    return g / g.sum()


def _fill_outside(channel, mask):
    """Replace pixels outside ``mask`` by their nearest ROI pixel (replicate-edge)."""
    if mask.all():
        return channel
    _, (iy, ix) = ndimage.distance_transform_edt(~mask, return_indices=True)
    return channel[iy, ix]


def gaussian_blur(channel, theta, radius, mask=None):
    """Separable Gaussian correlation with replicate-edge boundaries (at the ROI rim when masked)."""
    src = np.asarray(channel, dtype=float)
    if mask is not None:
        src = _fill_outside(src, mask)
    g = gaussian_kernel_1d(theta, radius)
    out = ndimage.correlate1d(src, g, axis=0, mode="nearest")
    return ndimage.correlate1d(out, g, axis=1, mode="nearest")


def enhance(raw: FundusImage, params: PreprocessParams | None = None) -> FundusImage:
    """Per channel ``alpha*I + beta*(G * I) + gamma`` clamped to [0, 255]; zero outside the ROI."""
    params = params or PreprocessParams()
    mask = np.asarray(raw.roi_mask, dtype=bool)
    if not mask.any():
        raise NotAFundusError("empty region of interest")
    px = np.asarray(raw.pixels, dtype=float)
    out = np.empty_like(px)
    for c in range(px.shape[0]):
        blurred = gaussian_blur(px[c], params.theta, params.kernel_radius, mask)
        out[c] = params.alpha * px[c] + params.beta * blurred + params.gamma
    np.clip(out, 0, 255, out=out)
    out[:, ~mask] = 0
    return FundusImage(out, mask, dict(raw.meta))


def extract_roi(pixels, params: PreprocessParams | None = None):
    """Largest connected bright region (channel mean above a fraction of its maximum)."""
    params = params or PreprocessParams()
    px = np.asarray(pixels, dtype=float)
    mean = px.mean(axis=0) if px.ndim == 3 else px
    peak = mean.max()
    if peak <= 0:
        raise NotAFundusError("image is entirely dark")
    bright = mean > params.roi_threshold * peak
    labels, n = ndimage.label(bright)
    if n == 0:
        raise NotAFundusError("no pixel exceeds the ROI threshold")
    sizes = np.bincount(labels.ravel())[1:]
    mask = labels == (np.argmax(sizes) + 1)
    if mask.sum() < params.min_roi_fraction * mask.size:
        raise NotAFundusError(f"ROI covers only {mask.mean():.2%} of the image")
    return mask


def bounding_square(mask):
    """Row/col slice pair of the mask's bounding box."""
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    return slice(rows[0], rows[-1] + 1), slice(cols[0], cols[-1] + 1)


@dataclass(frozen=True)
class CoordMap:
    """Affine map from source pixel-edge coordinates to the processed frame: ``q = (p - offset) * scale``."""

    offset_x: float = 0.0
    offset_y: float = 0.0
    scale: float = 1.0

    def point(self, x, y):
        return (x - self.offset_x) * self.scale, (y - self.offset_y) * self.scale

    def box(self, x, y, w, h):
        nx, ny = self.point(x, y)
        return nx, ny, w * self.scale, h * self.scale


def pad_to_square(pixels):
    """Zero-pad the shorter side symmetrically; returns ``(padded, (pad_top, pad_left))``."""
    px = np.asarray(pixels)
    h, w = px.shape[-2:]
    side = max(h, w)
    top, left = (side - h) // 2, (side - w) // 2
    pad = [(0, 0)] * (px.ndim - 2) + [(top, side - h - top), (left, side - w - left)]
    return np.pad(px, pad), (top, left)


def _resize_plane(plane, target):
    img = Image.fromarray(np.asarray(plane, dtype=np.float32), mode="F")
    return np.asarray(img.resize((target, target), Image.BILINEAR), dtype=float)


def resize_square(pixels, target):
    px = np.asarray(pixels, dtype=float)
    if px.shape[-1] == target and px.shape[-2] == target:
        return px.copy()
    if px.ndim == 2:
        return _resize_plane(px, target)
    return np.stack([_resize_plane(ch, target) for ch in px])


def pad_and_resize(image, target: int):
    """Square by zero padding, then bilinear resize to ``target``×``target``.

    Accepts a :class:`FundusImage` (mask resized alongside) or a bare array.
    Returns the resized object and the :class:`CoordMap` from input coordinates.
    """
    if target < 16:
        raise ValueError("target side must be >= 16")
    if isinstance(image, FundusImage):
        padded, (top, left) = pad_to_square(image.pixels)
        mask, _ = pad_to_square(image.roi_mask.astype(float))
        side = padded.shape[-1]
        out = FundusImage(resize_square(padded, target), resize_square(mask, target) >= 0.5,
                          dict(image.meta))
    else:
        padded, (top, left) = pad_to_square(image)
        side = padded.shape[-1]
        out = resize_square(padded, target)
    return out, CoordMap(-left, -top, target / side)


def prepare(raw_pixels, d, params: PreprocessParams | None = None, source_id=""):
    """ROI → crop to its bounding box → pad/resize to ``d`` → enhance.

    Returns the enhanced :class:`FundusImage` and the :class:`CoordMap`
    taking raw-image coordinates into the ``d``×``d`` frame.
    """
    params = params or PreprocessParams()
    raw = np.asarray(raw_pixels, dtype=float)
    if raw.ndim == 2:
        raw = raw[None]
    mask = extract_roi(raw, params)
    rs, cs = bounding_square(mask)
    cropped = FundusImage(raw[:, rs, cs], mask[rs, cs],
                          {"source_id": source_id, "original_dims": raw.shape[-2:]})
    resized, cmap = pad_and_resize(cropped, d)
    full = CoordMap(cs.start + cmap.offset_x, rs.start + cmap.offset_y, cmap.scale)
    return enhance(resized, params), full
