"""Depth-image segmentation chain producing the fixed-size network input.

Stages, in order: range threshold, masking of everything above the clip
anchor line, fixed crop with area-average downsampling, and normalization of
meters into [0, 1].  Every stage is a deterministic pure function; 0 remains
the invalid/background sentinel throughout.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from softply.render import DepthImage


class PreprocessError(ValueError):
    """Raised for invalid specs or degenerate anchor geometry."""


@dataclass(frozen=True)
class CropRect:
    x0: int
    y0: int
    width: int
    height: int

    def __post_init__(self) -> None:
        if self.width < 1 or self.height < 1:
            raise PreprocessError("crop must have positive size")
        if self.x0 < 0 or self.y0 < 0:
            raise PreprocessError("crop origin must be non-negative")


@dataclass(frozen=True)
class PreprocessSpec:
    z_min: float
    z_max: float
    line_offset: float            # pixels the mask line is shifted above the anchors
    crop: CropRect
    out_size: int

    def __post_init__(self) -> None:
        if not self.z_min < self.z_max:
            raise PreprocessError("need z_min < z_max")
        if self.out_size < 8:
            raise PreprocessError("out_size must be at least 8")


def threshold(img: DepthImage, z_min: float, z_max: float) -> DepthImage:
    """Keep pixels with value in [z_min, z_max] (inclusive), zero the rest."""
    if not z_min < z_max:
        raise PreprocessError("need z_min < z_max")
    vals = img.values
    keep = (vals >= z_min) & (vals <= z_max)
    return DepthImage(img.width, img.height, np.where(keep, vals, 0.0))


def mask_above_line(img: DepthImage, anchor_a, anchor_b,
                    offset: float = 0.0) -> DepthImage:
    """Zero all pixels whose center lies above the shifted anchor line.

    The line through the two anchors is moved `offset` pixels toward
    decreasing v; "above" is the decreasing-v side.  Anchors are (u, v)
    pixel coordinates and must not be coincident or vertically aligned.
    """
    ua, va = (float(c) for c in anchor_a)
    ub, vb = (float(c) for c in anchor_b)
    if ua == ub and va == vb:
        raise PreprocessError("anchors are coincident")
    if ua == ub:
        raise PreprocessError("anchor line is vertical; no side is 'above'")
    slope = (vb - va) / (ub - ua)
    intercept = va - slope * ua - offset

    u = np.arange(img.width) + 0.5
    v = np.arange(img.height) + 0.5
    line_v = slope * u[None, :] + intercept
    above = v[:, None] < line_v
    return DepthImage(img.width, img.height, np.where(above, 0.0, img.values))


def crop_resize(img: DepthImage, crop: CropRect, out_size: int) -> DepthImage:
    """Crop the ROI and area-average it down to out_size x out_size.

    Fractional source coverage is weighted by overlap, and zeros participate
    in the averages like any other value.
    """
    if crop.x0 + crop.width > img.width or crop.y0 + crop.height > img.height:
        raise PreprocessError(
            f"crop {crop} exceeds image {img.width}x{img.height}")
    roi = img.values[crop.y0:crop.y0 + crop.height,
                     crop.x0:crop.x0 + crop.width].astype(np.float64)
    wr = _box_weights(crop.height, out_size)
    wc = _box_weights(crop.width, out_size)
    out = wr @ roi @ wc.T
    return DepthImage(out_size, out_size, out.astype(np.float32))


def normalize(img: DepthImage, z_min: float, z_max: float) -> np.ndarray:
    """Map nonzero meters to [0, 1]; zero (invalid) pixels stay 0.

    z_min itself maps to 0 and is indistinguishable from the sentinel; z_min
    is chosen below any real ply depth so the collision has no effect.
    """
    if not z_min < z_max:
        raise PreprocessError("need z_min < z_max")
    vals = img.values.astype(np.float64)
    scaled = np.clip((vals - z_min) / (z_max - z_min), 0.0, 1.0)
    return np.where(vals > 0, scaled, 0.0).astype(np.float32)


def pipeline(img: DepthImage, anchors, spec: PreprocessSpec) -> np.ndarray:
    """Full chain: threshold -> mask above anchors -> crop/resize -> normalize."""
    out = threshold(img, spec.z_min, spec.z_max)
    out = mask_above_line(out, anchors[0], anchors[1], spec.line_offset)
    out = crop_resize(out, spec.crop, spec.out_size)
    return normalize(out, spec.z_min, spec.z_max)


def _box_weights(n_in: int, n_out: int) -> np.ndarray:
    """Rows of fractional-overlap box-filter weights; each row sums to 1."""
    w = np.zeros((n_out, n_in))
    scale = n_in / n_out
    for o in range(n_out):
        lo = o * scale
        hi = (o + 1) * scale
        for i in range(int(math.floor(lo)), min(int(math.ceil(hi)), n_in)):
            overlap = min(hi, i + 1.0) - max(lo, float(i))
            if overlap > 0:
                w[o, i] = overlap / scale
    return w
