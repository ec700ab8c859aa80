"""Slide-level cross-validation splits, class balancing and flip augmentation."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Dict, List, Sequence

import numpy as np

from .tiling import N_CLASSES, PatchRecord

ROLES = ("train", "val", "test")


@dataclass(frozen=True)
class FoldSplit:
    fold_index: int
    train_wsis: tuple
    val_wsis: tuple
    test_wsis: tuple

    def role_of(self, wsi_id) -> str:
        for role in ROLES:
            if wsi_id in getattr(self, f"{role}_wsis"):
                return role
        raise KeyError(wsi_id)


def split_folds(
    wsi_ids: Sequence, k: int = 5, seed: int = 0, val_fraction: float = 0.2
) -> List[FoldSplit]:
    """K-fold split by slide with a random validation subset per fold.

    Slides are shuffled with ``seed`` and cut into ``k`` contiguous folds whose
    sizes differ by at most one (larger folds first). For fold ``i`` the
    remaining slides give ``max(1, round(val_fraction * n))`` validation
    slides, chosen at random, and the rest train.
    """
    ids = list(wsi_ids)
    if k < 2:
        raise ValueError(f"k must be >= 2, got {k}")
    if len(ids) < k:
        raise ValueError(f"cannot split {len(ids)} slides into {k} folds")
    if len(set(ids)) != len(ids):
        raise ValueError("wsi ids must be unique")
    rng = np.random.default_rng(seed)
    order = [ids[i] for i in rng.permutation(len(ids))]
    base, extra = divmod(len(ids), k)
    folds, start = [], 0
    for i in range(k):
        size = base + (1 if i < extra else 0)
        folds.append(order[start : start + size])
        start += size

    splits = []
    for i in range(k):
        rest = [w for j, fold in enumerate(folds) if j != i for w in fold]
        n_val = max(1, math.floor(val_fraction * len(rest) + 0.5))
        pick = np.random.default_rng([seed, i]).choice(len(rest), size=n_val, replace=False)
        chosen = set(pick.tolist())
        val = tuple(rest[j] for j in sorted(chosen))
        train = tuple(w for j, w in enumerate(rest) if j not in chosen)
        splits.append(FoldSplit(i, train, val, tuple(folds[i])))
    return splits


def balance_indices(labels, seed: int = 0, n_classes: int = N_CLASSES) -> np.ndarray:
    """Indices that resample every class to the median class count.

    Larger classes are subsampled without replacement; smaller ones keep all
    their members and gain duplicates drawn with replacement.
    """
    labels = np.asarray(labels, dtype=int)
    counts = np.bincount(labels, minlength=n_classes)[:n_classes]
    if np.any(counts == 0):
        missing = [c for c in range(n_classes) if counts[c] == 0]
        raise ValueError(f"classes {missing} have no samples; cannot balance")
    target = int(math.floor(float(np.median(counts)) + 0.5))
    rng = np.random.default_rng(seed)
    out = []
    for c in range(n_classes):
        members = np.flatnonzero(labels == c)
        if members.size >= target:
            out.append(np.sort(rng.choice(members, size=target, replace=False)))
        else:
            extra = rng.choice(members, size=target - members.size, replace=True)
            out.append(np.concatenate([members, extra]))
    return np.concatenate(out)


def balance_classes(patches: Sequence[PatchRecord], seed: int = 0) -> List[PatchRecord]:
    if any(p.label is None for p in patches):
        raise ValueError("cannot balance unlabelled patches")
    idx = balance_indices([p.label for p in patches], seed)
    return [patches[i] for i in idx]


def augment_flip(tile, bits) -> np.ndarray:
    """Flip left/right when ``bits[0]`` is set, top/bottom when ``bits[1]`` is."""
    tile = np.asarray(tile)
    if tile.shape[0] != tile.shape[1]:
        raise ValueError(f"expected a square tile, got {tile.shape[:2]}")
    if bits[0]:
        tile = tile[:, ::-1]
    if bits[1]:
        tile = tile[::-1]
    return tile.copy()


def random_flips(tiles: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Independent random flips for a ``(N, H, W, C)`` batch."""
    bits = rng.integers(0, 2, size=(len(tiles), 2))
    out = tiles.copy()
    for i, (h, v) in enumerate(bits):
        if h or v:
            out[i] = augment_flip(tiles[i], (h, v))
    return out


def write_folds(path, splits: Sequence[FoldSplit]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["wsi_id", "fold", "role"])
        for split in splits:
            for role in ROLES:
                for wsi in getattr(split, f"{role}_wsis"):
                    writer.writerow([wsi, split.fold_index, role])


def read_folds(path) -> List[FoldSplit]:
    table: Dict[int, Dict[str, list]] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            fold = table.setdefault(int(row["fold"]), {r: [] for r in ROLES})
            if row["role"] not in ROLES:
                raise ValueError(f"unknown role {row['role']!r}")
            fold[row["role"]].append(row["wsi_id"])
    return [
        FoldSplit(i, tuple(t["train"]), tuple(t["val"]), tuple(t["test"]))
        for i, t in sorted(table.items())
    ]
