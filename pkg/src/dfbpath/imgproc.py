"""Colour conversion, downscaling, thresholding and binary morphology.

Everything here works on numpy arrays: RGB images are ``(H, W, 3)`` uint8,
masks are ``(H, W)`` bool with ``True`` meaning tissue.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Tuple

import numpy as np
from PIL import Image
from scipy import ndimage

# 8-connectivity for foreground objects, 4-connectivity for holes.
_STRUCT_8 = np.ones((3, 3), dtype=bool)
_STRUCT_4 = ndimage.generate_binary_structure(2, 1)

DEFAULT_MIN_AREA = 64
DEFAULT_MAX_HOLE_AREA = 256


@dataclass(frozen=True)
class HsvThresholds:
    """Foreground rule: ``S >= sat_min and V <= val_max`` (and hue in range).

    ``hue_range`` is a ``(low, high)`` interval in degrees; ``low > high``
    wraps through 0.
    """

    sat_min: float = 0.07
    val_max: float = 0.95
    hue_range: Optional[Tuple[float, float]] = None

    def __post_init__(self):
        if not 0.0 <= self.sat_min <= 1.0:
            raise ValueError(f"sat_min must lie in [0, 1], got {self.sat_min}")
        if not 0.0 <= self.val_max <= 1.0:
            raise ValueError(f"val_max must lie in [0, 1], got {self.val_max}")
        if self.hue_range is not None:
            lo, hi = self.hue_range
            if not (0.0 <= lo < 360.0 and 0.0 <= hi <= 360.0):
                raise ValueError(f"hue_range must lie in [0, 360), got {self.hue_range}")


def check_rgb(img) -> np.ndarray:
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected an (H, W, 3) RGB image, got shape {img.shape}")
    if img.shape[0] < 1 or img.shape[1] < 1:
        raise ValueError("image must be at least 1x1")
    if img.dtype != np.uint8:
        if np.any(img < 0) or np.any(img > 255):
            raise ValueError("RGB values must lie in [0, 255]")
        img = img.astype(np.uint8)
    return img


def check_mask(mask) -> np.ndarray:
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ValueError(f"expected a 2D mask, got shape {mask.shape}")
    return mask.astype(bool, copy=False)


def rgb_to_hsv(rgb) -> np.ndarray:
    """Convert 8-bit RGB to HSV.

    Accepts a single triple or any array whose last axis has length 3.
    Returns hue in degrees ``[0, 360)``, saturation and value in ``[0, 1]``.
    Achromatic pixels get hue 0.
    """
    rgb = np.asarray(rgb, dtype=np.float64) / 255.0
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    maxc = rgb.max(axis=-1)
    minc = rgb.min(axis=-1)
    delta = maxc - minc
    v = maxc
    with np.errstate(invalid="ignore", divide="ignore"):
        s = np.where(maxc > 0, delta / maxc, 0.0)
        safe = np.where(delta > 0, delta, 1.0)
        rc = (g - b) / safe
        gc = (b - r) / safe + 2.0
        bc = (r - g) / safe + 4.0
    h = np.where(maxc == r, rc, np.where(maxc == g, gc, bc))
    h = np.where(delta > 0, (60.0 * h) % 360.0, 0.0)
    return np.stack([h, s, v], axis=-1)


def hsv_to_rgb(hsv) -> np.ndarray:
    """Inverse of :func:`rgb_to_hsv`, returning uint8 RGB."""
    hsv = np.asarray(hsv, dtype=np.float64)
    h, s, v = hsv[..., 0] / 60.0, hsv[..., 1], hsv[..., 2]
    i = np.floor(h).astype(int) % 6
    f = h - np.floor(h)
    p = v * (1 - s)
    q = v * (1 - s * f)
    t = v * (1 - s * (1 - f))
    choices_r = [v, q, p, p, t, v]
    choices_g = [t, v, v, q, p, p]
    choices_b = [p, p, t, v, v, q]
    r = np.choose(i, choices_r)
    g = np.choose(i, choices_g)
    b = np.choose(i, choices_b)
    out = np.stack([r, g, b], axis=-1) * 255.0
    return np.clip(np.floor(out + 0.5), 0, 255).astype(np.uint8)


def downscale(img, factor: int) -> np.ndarray:
    """Box-filter downscale by an integer factor.

    Each output pixel is the mean of a ``factor x factor`` block, rounded to
    the nearest integer with ties going up. Partial blocks on the right and
    bottom edges are dropped.
    """
    img = check_rgb(img)
    factor = int(factor)
    if factor < 1:
        raise ValueError(f"factor must be >= 1, got {factor}")
    h, w = img.shape[:2]
    if h < factor or w < factor:
        raise ValueError(f"image {w}x{h} is smaller than the downscale factor {factor}")
    if factor == 1:
        return img.copy()
    oh, ow = h // factor, w // factor
    blocks = img[: oh * factor, : ow * factor].astype(np.int64)
    sums = blocks.reshape(oh, factor, ow, factor, 3).sum(axis=(1, 3))
    n = factor * factor
    # floor(sum / n + 1/2) in exact integer arithmetic
    return ((2 * sums + n) // (2 * n)).astype(np.uint8)


def threshold_tissue(img, thresholds: Optional[HsvThresholds] = None) -> np.ndarray:
    """Pixelwise HSV threshold; returns a boolean tissue mask."""
    t = thresholds or HsvThresholds()
    hsv = rgb_to_hsv(check_rgb(img))
    mask = (hsv[..., 1] >= t.sat_min) & (hsv[..., 2] <= t.val_max)
    if t.hue_range is not None:
        lo, hi = t.hue_range
        hue = hsv[..., 0]
        if lo <= hi:
            mask &= (hue >= lo) & (hue <= hi)
        else:
            mask &= (hue >= lo) | (hue <= hi)
    return mask


def remove_small_objects(mask, min_area: int = DEFAULT_MIN_AREA) -> np.ndarray:
    """Drop 8-connected foreground components with fewer than ``min_area`` pixels."""
    mask = check_mask(mask)
    if min_area < 0:
        raise ValueError("min_area must be >= 0")
    if min_area <= 1 or not mask.any():
        return mask.copy()
    labels, n = ndimage.label(mask, structure=_STRUCT_8)
    areas = np.bincount(labels.ravel(), minlength=n + 1)
    keep = areas >= min_area
    keep[0] = False
    return keep[labels]


def fill_small_holes(mask, max_hole_area: int = DEFAULT_MAX_HOLE_AREA) -> np.ndarray:
    """Fill 4-connected background components that do not touch the image
    border and have at most ``max_hole_area`` pixels."""
    mask = check_mask(mask)
    if max_hole_area < 0:
        raise ValueError("max_hole_area must be >= 0")
    if max_hole_area == 0:
        return mask.copy()
    labels, n = ndimage.label(~mask, structure=_STRUCT_4)
    if n == 0:
        return mask.copy()
    areas = np.bincount(labels.ravel(), minlength=n + 1)
    border = np.unique(
        np.concatenate([labels[0], labels[-1], labels[:, 0], labels[:, -1]])
    )
    fill = areas <= max_hole_area
    fill[0] = False
    fill[border] = False
    return mask | fill[labels]


def tissue_mask(
    img,
    factor: int = 16,
    thresholds: Optional[HsvThresholds] = None,
    min_area: int = DEFAULT_MIN_AREA,
    max_hole_area: int = DEFAULT_MAX_HOLE_AREA,
) -> np.ndarray:
    """Full masking pipeline: downscale, threshold, remove fragments, fill holes."""
    small = downscale(img, factor)
    mask = threshold_tissue(small, thresholds)
    mask = remove_small_objects(mask, min_area)
    return fill_small_holes(mask, max_hole_area)


def read_rgb(path) -> np.ndarray:
    """Read a PNG/PPM (or anything PIL opens) as uint8 RGB."""
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()


def write_rgb(path, img) -> None:
    Image.fromarray(check_rgb(img)).save(Path(path))


def read_mask(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("L")) > 127


def write_mask(path, mask) -> None:
    """Write as 8-bit grayscale: 0 background, 255 tissue."""
    data = np.where(check_mask(mask), 255, 0).astype(np.uint8)
    Image.fromarray(data).save(Path(path))
