"""Distance-from-boundary images.

The production path is a two-pass (3, 4) chamfer transform; an exact
Euclidean transform is available for testing and for callers that want it.
Both return float arrays in low-resolution pixel units, zero on background.
"""

from __future__ import annotations

import math
import struct
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .imgproc import check_mask

AXIAL = 3
DIAGONAL = 4
_INF = np.iinfo(np.int64).max // 4

BIN_MAGIC = b"DFB1"
_BIN_HEADER = struct.Struct("<4sIII")  # magic, width, height, reserved


class BoundaryUndefinedError(ValueError):
    """Raised when a mask has no background anywhere to measure from."""


def _prepare(mask, border_is_tissue: bool) -> np.ndarray:
    mask = check_mask(mask)
    if mask.size == 0:
        raise ValueError("mask must be non-empty")
    if border_is_tissue and mask.all():
        raise BoundaryUndefinedError(
            "mask is all tissue and the border counts as tissue: no boundary"
        )
    return mask


def _scan(row: np.ndarray, step: int) -> np.ndarray:
    # d[j] = min_{k<=j} row[k] + step*(j-k), via a running minimum.
    idx = np.arange(row.size, dtype=np.int64) * step
    return np.minimum.accumulate(row - idx) + idx


def _chamfer_passes(fg: np.ndarray) -> np.ndarray:
    """Forward/backward chamfer sweep; cells outside ``fg`` are seeds (0)."""
    h, w = fg.shape
    d = np.where(fg, _INF, 0).astype(np.int64)
    big = np.full(1, _INF, dtype=np.int64)
    for i in range(h):
        row = d[i]
        if i > 0:
            up = d[i - 1]
            padded = np.concatenate([big, up, big])
            cand = np.minimum(up + AXIAL, np.minimum(padded[:-2], padded[2:]) + DIAGONAL)
            row = np.minimum(row, cand)
        d[i] = _scan(row, AXIAL)
    for i in range(h - 1, -1, -1):
        row = d[i]
        if i < h - 1:
            down = d[i + 1]
            padded = np.concatenate([big, down, big])
            cand = np.minimum(down + AXIAL, np.minimum(padded[:-2], padded[2:]) + DIAGONAL)
            row = np.minimum(row, cand)
        d[i] = _scan(row[::-1], AXIAL)[::-1]
    return d


def chamfer_thirds(mask, border_is_tissue: bool = False) -> np.ndarray:
    """Integer (3, 4) chamfer distances, before division by 3."""
    mask = _prepare(mask, border_is_tissue)
    if border_is_tissue:
        return _chamfer_passes(mask)
    padded = np.pad(mask, 1, constant_values=False)
    return _chamfer_passes(padded)[1:-1, 1:-1]


def distance_transform_chamfer(mask, border_is_tissue: bool = False) -> np.ndarray:
    """Two-pass (3, 4) chamfer transform divided by 3.

    Pixels outside the image count as background unless ``border_is_tissue``
    is set, in which case the mask itself must contain some background.
    """
    return chamfer_thirds(mask, border_is_tissue).astype(np.float64) / 3.0


def distance_transform_exact(mask, border_is_tissue: bool = False) -> np.ndarray:
    """Exact Euclidean distance to the nearest background pixel."""
    mask = _prepare(mask, border_is_tissue)
    if not mask.any():
        return np.zeros(mask.shape, dtype=np.float64)
    if border_is_tissue:
        return ndimage.distance_transform_edt(mask).astype(np.float64)
    padded = np.pad(mask, 1, constant_values=False)
    return ndimage.distance_transform_edt(padded)[1:-1, 1:-1].astype(np.float64)


def distance_transform(mask, method: str = "chamfer", border_is_tissue: bool = False):
    if method == "chamfer":
        return distance_transform_chamfer(mask, border_is_tissue)
    if method == "exact":
        return distance_transform_exact(mask, border_is_tissue)
    raise ValueError(f"unknown distance method {method!r}")


def max_dfb(dfb) -> float:
    dfb = np.asarray(dfb)
    return float(dfb.max()) if dfb.size else 0.0


# -- serialization ---------------------------------------------------------


def png_scale(max_value: float) -> float:
    return 256.0 / math.ceil(max_value + 1)


def write_dfb_png(path, dfb) -> float:
    """Write a 16-bit PNG plus a ``<path>.txt`` sidecar with the scale factor.

    Stored value is ``round(dfb * scale)`` with ``scale = 256 / ceil(max + 1)``.
    Returns the scale.
    """
    dfb = np.asarray(dfb, dtype=np.float64)
    scale = png_scale(max_dfb(dfb))
    data = np.floor(dfb * scale + 0.5).astype(np.uint16)
    Image.fromarray(data).save(Path(path))
    Path(str(path) + ".txt").write_text(
        f"scale {scale!r}\nmax {max_dfb(dfb)!r}\nwidth {dfb.shape[1]}\nheight {dfb.shape[0]}\n"
    )
    return scale


def read_dfb_png(path) -> np.ndarray:
    header = {}
    for line in Path(str(path) + ".txt").read_text().splitlines():
        if line.strip():
            key, value = line.split(None, 1)
            header[key] = value
    with Image.open(path) as im:
        data = np.asarray(im, dtype=np.float64)
    return data / float(header["scale"])


def write_dfb_bin(path, dfb) -> None:
    """Lossless float32 export with a 16-byte header (magic, width, height, 0)."""
    dfb = np.asarray(dfb, dtype="<f4")
    h, w = dfb.shape
    with open(path, "wb") as fh:
        fh.write(_BIN_HEADER.pack(BIN_MAGIC, w, h, 0))
        fh.write(np.ascontiguousarray(dfb).tobytes())


def read_dfb_bin(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    magic, w, h, _ = _BIN_HEADER.unpack_from(raw)
    if magic != BIN_MAGIC:
        raise ValueError(f"{path}: not a DfB binary file")
    data = np.frombuffer(raw, dtype="<f4", offset=_BIN_HEADER.size)
    if data.size != w * h:
        raise ValueError(f"{path}: expected {w * h} values, found {data.size}")
    return data.reshape(h, w).astype(np.float64)
