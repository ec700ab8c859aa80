"""Patch grids, coordinate mapping, per-patch DfB pooling and prediction maps.

Class indices used by the model are 0..2 (``CLASS_NAMES``). Label images
store ``index + 1`` and reserve 0 for "no label" (background or unannotated).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, List, Optional, Sequence

import numpy as np
from PIL import Image

CLASS_NAMES = ("NonNeop", "LSIL", "HSIL")
N_CLASSES = len(CLASS_NAMES)
NO_LABEL = 0

# Display colours for prediction maps: gray, blue, red on black.
LABEL_COLOURS = np.array(
    [[0, 0, 0], [128, 128, 128], [0, 0, 255], [255, 0, 0]], dtype=np.uint8
)

MANIFEST_FIELDS = ["wsi_id", "x", "y", "size", "dfb_mean", "label"]


def class_index(name) -> int:
    """Map a class name (or integer-like string) to its index."""
    if isinstance(name, (int, np.integer)):
        idx = int(name)
    elif str(name) in CLASS_NAMES:
        return CLASS_NAMES.index(str(name))
    else:
        try:
            idx = int(name)
        except ValueError:
            raise ValueError(f"unknown class label {name!r}") from None
    if not 0 <= idx < N_CLASSES:
        raise ValueError(f"class index {idx} out of range")
    return idx


@dataclass(frozen=True)
class PatchRect:
    x: int
    y: int
    size: int

    def __post_init__(self):
        if self.x < 0 or self.y < 0:
            raise ValueError(f"negative patch origin ({self.x}, {self.y})")
        if self.size < 1:
            raise ValueError(f"patch size must be >= 1, got {self.size}")

    def slices(self):
        return slice(self.y, self.y + self.size), slice(self.x, self.x + self.size)

    def fits(self, width: int, height: int) -> bool:
        return self.x + self.size <= width and self.y + self.size <= height


@dataclass
class PatchRecord:
    """One sample: where it came from, its mean DfB, its class and (optionally)
    its pixels."""

    wsi_id: str
    rect: PatchRect
    dfb_mean: float
    label: Optional[int]
    image: Optional[np.ndarray] = field(default=None, repr=False)


def tile_grid(width: int, height: int, patch_size: int, stride: int) -> List[PatchRect]:
    """Non-padded sliding window, row-major. Empty when the patch does not fit."""
    if patch_size < 1 or stride < 1:
        raise ValueError("patch_size and stride must be >= 1")
    if width < patch_size or height < patch_size:
        return []
    nx = (width - patch_size) // stride + 1
    ny = (height - patch_size) // stride + 1
    return [
        PatchRect(i * stride, j * stride, patch_size)
        for j in range(ny)
        for i in range(nx)
    ]


def map_to_lowres(rect: PatchRect, factor: int, shape=None) -> PatchRect:
    """Map a full-resolution rect onto a raster downscaled by ``factor``.

    ``shape`` (height, width) of the low-res raster, when given, clamps the
    result inside it.
    """
    if factor < 1:
        raise ValueError("factor must be >= 1")
    x, y = rect.x // factor, rect.y // factor
    size = math.ceil(rect.size / factor)
    if shape is not None:
        h, w = shape
        x, y = min(x, w - 1), min(y, h - 1)
        size = max(1, min(size, w - x, h - y))
    return PatchRect(x, y, size)


def mean_dfb(dfb, rect: PatchRect) -> float:
    dfb = np.asarray(dfb, dtype=np.float64)
    h, w = dfb.shape
    if not rect.fits(w, h):
        raise ValueError(f"{rect} lies outside a {w}x{h} DfB image")
    region = np.ascontiguousarray(dfb[rect.slices()])
    if region.size == 0:
        raise ValueError("empty region")
    return float(region.sum() / region.size)


def label_patch(gt, rect: PatchRect) -> Optional[int]:
    """Class index if every pixel of ``rect`` carries the same class, else None."""
    gt = np.asarray(gt)
    h, w = gt.shape
    if not rect.fits(w, h):
        raise ValueError(f"{rect} lies outside a {w}x{h} label image")
    region = gt[rect.slices()]
    first = int(region.flat[0])
    if first == NO_LABEL or np.any(region != first):
        return None
    return first - 1


def stitch_prediction_map(
    grid: Sequence[PatchRect],
    preds: Sequence[int],
    tissue,
    gt=None,
    factor: int = 1,
) -> np.ndarray:
    """Paint per-patch class predictions into a label image.

    ``grid`` rects are in output coordinates; the output is ``factor`` times
    the size of ``tissue`` (and of ``gt``, when given). Pixels outside every
    rect, on background, or unlabelled in ``gt`` end up as ``NO_LABEL``.
    """
    if len(grid) != len(preds):
        raise ValueError(f"{len(grid)} rects but {len(preds)} predictions")
    tissue = np.asarray(tissue, dtype=bool)
    if factor < 1:
        raise ValueError("factor must be >= 1")
    h, w = tissue.shape[0] * factor, tissue.shape[1] * factor
    out = np.zeros((h, w), dtype=np.uint8)
    for rect, pred in zip(grid, preds):
        if not rect.fits(w, h):
            raise ValueError(f"{rect} lies outside the {w}x{h} map")
        out[rect.slices()] = class_index(pred) + 1
    keep = _upscale(tissue, factor)
    if gt is not None:
        gt = np.asarray(gt)
        if gt.shape != tissue.shape:
            raise ValueError("gt and tissue mask must have the same shape")
        keep &= _upscale(gt != NO_LABEL, factor)
    out[~keep] = NO_LABEL
    return out


def _upscale(a: np.ndarray, factor: int) -> np.ndarray:
    if factor == 1:
        return a.copy()
    return np.repeat(np.repeat(a, factor, axis=0), factor, axis=1)


def extract_patches(
    wsi_id: str,
    image,
    dfb,
    gt=None,
    factor: int = 16,
    patch_size: int = 256,
    stride: Optional[int] = None,
    tissue=None,
    single_class: bool = True,
    with_pixels: bool = True,
) -> List[PatchRecord]:
    """Tile a slide and attach mean DfB and label to every patch.

    ``dfb``, ``gt`` and ``tissue`` live at the low resolution. With
    ``single_class`` only patches with a single-class label are returned;
    otherwise every patch touching tissue is kept (for prediction maps) and
    its label may be None.
    """
    image = np.asarray(image)
    stride = stride or patch_size
    height, width = image.shape[:2]
    dfb = np.asarray(dfb, dtype=np.float64)
    records = []
    for rect in tile_grid(width, height, patch_size, stride):
        low = map_to_lowres(rect, factor, dfb.shape)
        label = label_patch(gt, low) if gt is not None else None
        if single_class and label is None:
            continue
        if not single_class and tissue is not None and not np.asarray(tissue)[low.slices()].any():
            continue
        pixels = image[rect.slices()].copy() if with_pixels else None
        records.append(PatchRecord(wsi_id, rect, mean_dfb(dfb, low), label, pixels))
    return records


# -- manifests ---------------------------------------------------------------


def write_manifest(path, records: Iterable[PatchRecord]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_FIELDS)
        for r in records:
            label = "" if r.label is None else CLASS_NAMES[r.label]
            writer.writerow([r.wsi_id, r.rect.x, r.rect.y, r.rect.size, repr(float(r.dfb_mean)), label])


def read_manifest(path) -> List[PatchRecord]:
    records = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            label = class_index(row["label"]) if row["label"] else None
            rect = PatchRect(int(row["x"]), int(row["y"]), int(row["size"]))
            records.append(PatchRecord(row["wsi_id"], rect, float(row["dfb_mean"]), label))
    return records


def export_tiles(root, records: Iterable[PatchRecord]) -> None:
    """Write ``tiles/<wsi_id>/<x>_<y>.png`` under ``root``."""
    for r in records:
        if r.image is None:
            raise ValueError(f"patch {r.wsi_id}@{r.rect} has no pixel data")
        out = Path(root) / "tiles" / r.wsi_id
        out.mkdir(parents=True, exist_ok=True)
        Image.fromarray(np.asarray(r.image, dtype=np.uint8)).save(out / f"{r.rect.x}_{r.rect.y}.png")


def write_label_image(path, labels) -> None:
    Image.fromarray(np.asarray(labels, dtype=np.uint8)).save(Path(path))


def read_label_image(path) -> np.ndarray:
    with Image.open(path) as im:
        data = np.asarray(im, dtype=np.uint8).copy()
    if data.max(initial=0) > N_CLASSES:
        raise ValueError(f"{path}: label values must lie in 0..{N_CLASSES}")
    return data


def colourize(labels) -> np.ndarray:
    return LABEL_COLOURS[np.asarray(labels, dtype=np.uint8)]
