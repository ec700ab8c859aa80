"""Synthetic slides whose lesion classes live only near the tissue boundary.

A slide is a smooth random blob on a white background. LSIL and HSIL regions
are angular sectors of the blob restricted to ``DfB <= lesion_band``. Part of
the non-neoplastic tissue (anywhere in the blob) is rendered with the LSIL
texture, so appearance alone cannot separate those two classes while the
distance from the boundary can.
"""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Tuple

import numpy as np
from scipy import ndimage

from .distance import distance_transform_chamfer
from .imgproc import write_mask, write_rgb
from .tiling import NO_LABEL, write_label_image

NON_NEOP, LSIL, HSIL = 1, 2, 3  # label-image codes

BACKGROUND_RGB = (244, 243, 245)

# base colour, stripe period (px), stripe angle (deg), stripe amplitude, noise sigma
TEXTURES = {
    NON_NEOP: ((222, 150, 196), 18.0, 30.0, 14.0, 9.0),
    LSIL: ((198, 128, 204), 9.0, 120.0, 14.0, 11.0),
    HSIL: ((150, 86, 176), 6.0, 75.0, 16.0, 13.0),
}


class GenerationError(RuntimeError):
    pass


@dataclass(frozen=True)
class SynthParams:
    width: int = 1024
    height: int = 1024
    factor: int = 4
    patch_size: int = 64
    radius_range: Tuple[float, float] = (0.33, 0.40)  # fraction of min(width, height)
    n_harmonics: int = 5
    harmonic_amp: float = 0.05
    lesion_band: float = 36.0  # low-res DfB units
    lesion_depth_range: Tuple[float, float] = (0.8, 1.0)  # fraction of lesion_band
    n_lesions: Tuple[int, int] = (3, 5)
    lesion_arc: Tuple[float, float] = (0.6, 1.2)  # radians
    mimic_fraction: float = 0.5
    mimic_sigma: float = 10.0  # low-res px
    colour_jitter: float = 8.0
    seed: int = 0

    def __post_init__(self):
        if self.lesion_band < 0:
            raise ValueError("lesion_band must be >= 0")
        if min(self.width, self.height) < 16 * self.patch_size:
            raise ValueError("slide must be at least 16 patches wide and tall")
        if self.width % self.factor or self.height % self.factor:
            raise ValueError("slide dimensions must be multiples of factor")
        if not 0.0 <= self.mimic_fraction < 1.0:
            raise ValueError("mimic_fraction must lie in [0, 1)")

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "SynthParams":
        d = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**d)


def _blob_mask(p: SynthParams, rng: np.random.Generator) -> Tuple[np.ndarray, Tuple[float, float]]:
    h, w = p.height // p.factor, p.width // p.factor
    r0 = rng.uniform(*p.radius_range) * min(h, w)
    cy = h / 2 + rng.uniform(-0.03, 0.03) * h
    cx = w / 2 + rng.uniform(-0.03, 0.03) * w
    amps = rng.uniform(-p.harmonic_amp, p.harmonic_amp, p.n_harmonics)
    phases = rng.uniform(0, 2 * np.pi, p.n_harmonics)
    yy, xx = np.mgrid[0:h, 0:w] + 0.5
    theta = np.arctan2(yy - cy, xx - cx)
    radius = np.full_like(theta, r0)
    for k, (a, ph) in enumerate(zip(amps, phases), start=2):
        radius += r0 * a * np.cos(k * theta + ph)
    mask = np.hypot(yy - cy, xx - cx) <= radius
    return mask, (cy, cx)


def _angle_in(theta, start, arc):
    return np.mod(theta - start, 2 * np.pi) <= arc


def generate_labels(p: SynthParams, rng: np.random.Generator):
    """Low-res tissue mask, label image, DfB and mimic map."""
    mask, (cy, cx) = _blob_mask(p, rng)
    if not mask.any():
        raise GenerationError("generated tissue blob is empty")
    dfb = distance_transform_chamfer(mask)
    labels = np.where(mask, NON_NEOP, NO_LABEL).astype(np.uint8)
    h, w = mask.shape
    yy, xx = np.mgrid[0:h, 0:w] + 0.5
    theta = np.arctan2(yy - cy, xx - cx)
    n_lesions = rng.integers(p.n_lesions[0], p.n_lesions[1] + 1)
    starts = np.sort(rng.uniform(0, 2 * np.pi, n_lesions))
    for start in starts:
        cls = LSIL if rng.random() < 0.5 else HSIL
        arc = rng.uniform(*p.lesion_arc)
        depth = p.lesion_band * rng.uniform(*p.lesion_depth_range)
        region = mask & (dfb <= depth) & _angle_in(theta, start, arc)
        labels[region] = cls

    mimic = np.zeros_like(mask)
    if p.mimic_fraction > 0:
        field_ = ndimage.gaussian_filter(rng.standard_normal(mask.shape), p.mimic_sigma, mode="wrap")
        cut = np.quantile(field_[mask], 1.0 - p.mimic_fraction)
        mimic = mask & (field_ > cut)
    return mask, labels, dfb, mimic


def _render(p: SynthParams, labels: np.ndarray, mimic: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    f = p.factor
    full_labels = np.repeat(np.repeat(labels, f, axis=0), f, axis=1)
    full_mimic = np.repeat(np.repeat(mimic, f, axis=0), f, axis=1)
    look = full_labels.copy()
    look[(full_labels == NON_NEOP) & full_mimic] = LSIL
    yy, xx = np.mgrid[0 : p.height, 0 : p.width].astype(np.float64)
    img = np.empty((p.height, p.width, 3), dtype=np.float64)
    img[:] = BACKGROUND_RGB
    img += rng.normal(0.0, 2.0, img.shape)
    jitter = rng.uniform(-p.colour_jitter, p.colour_jitter, 3)
    for code, (base, period, angle, amp, sigma) in TEXTURES.items():
        sel = look == code
        if not sel.any():
            continue
        a = np.deg2rad(angle)
        phase = rng.uniform(0, 2 * np.pi)
        stripes = amp * np.sin(2 * np.pi * (xx[sel] * np.cos(a) + yy[sel] * np.sin(a)) / period + phase)
        noise = rng.normal(0.0, sigma, (sel.sum(), 3))
        img[sel] = np.asarray(base, dtype=np.float64) + jitter + stripes[:, None] + noise
    return np.clip(np.floor(img + 0.5), 0, 255).astype(np.uint8)


def generate_wsi(p: SynthParams):
    """Render one slide.

    Returns ``(rgb, labels, mask)``: the full-resolution RGB image and the
    low-resolution (``1 / factor``) label image and tissue mask.
    """
    rng = np.random.default_rng(p.seed)
    mask, labels, _, mimic = generate_labels(p, rng)
    return _render(p, labels, mimic, rng), labels, mask


@dataclass
class SynthConfig:
    """A benchmark: ``n_slides`` slides sharing ``params``, seeded per slide."""

    n_slides: int = 40
    seed: int = 0
    params: SynthParams = field(default_factory=SynthParams)

    def slide_params(self, i: int) -> SynthParams:
        d = self.params.to_dict()
        d["seed"] = int(np.random.default_rng([self.seed, i]).integers(2**31))
        return SynthParams.from_dict(d)

    def slide_ids(self) -> List[str]:
        return [f"synth{i:03d}" for i in range(self.n_slides)]


SLIDE_FIELDS = ["wsi_id", "image", "gt", "mask", "factor", "patch_size"]


def write_dataset(out_dir, cfg: SynthConfig) -> Path:
    """Render every slide to ``slides/<id>/{image,gt,mask}.png`` and write
    ``slides.csv``. Returns the manifest path."""
    out = Path(out_dir)
    rows = []
    for i, wsi in enumerate(cfg.slide_ids()):
        rgb, labels, mask = generate_wsi(cfg.slide_params(i))
        d = out / "slides" / wsi
        d.mkdir(parents=True, exist_ok=True)
        write_rgb(d / "image.png", rgb)
        write_label_image(d / "gt.png", labels)
        write_mask(d / "mask.png", mask)
        rows.append([wsi, f"slides/{wsi}/image.png", f"slides/{wsi}/gt.png", f"slides/{wsi}/mask.png", cfg.params.factor, cfg.params.patch_size])
    manifest = out / "slides.csv"
    with open(manifest, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(SLIDE_FIELDS)
        writer.writerows(rows)
    return manifest


def read_slides(manifest) -> List[dict]:
    """Rows of a slide manifest with paths resolved against its directory."""
    manifest = Path(manifest)
    rows = []
    with open(manifest, newline="") as fh:
        for row in csv.DictReader(fh):
            for key in ("image", "gt", "mask"):
                if row.get(key):
                    row[key] = str(manifest.parent / row[key])
            row["factor"] = int(row["factor"])
            row["patch_size"] = int(row["patch_size"]) if row.get("patch_size") else None
            rows.append(row)
    return rows
