"""Slide preparation and the k-fold comparison of fusion strategies."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import model as M
from .dataset import FoldSplit, split_folds
from .distance import distance_transform, max_dfb
from .imgproc import DEFAULT_MAX_HOLE_AREA, DEFAULT_MIN_AREA, HsvThresholds, tissue_mask
from .metrics import MetricsReport, compute_metrics, confusion, curve_difference, recall_by_distance
from .tiling import CLASS_NAMES, PatchRecord, class_index, extract_patches

log = logging.getLogger(__name__)

ARMS = ("baseline", "dfb_cnn", "dfb_fc", "dfb_fc_transfer")
PREDICTION_FIELDS = ["wsi_id", "x", "y", "true_label", "pred_label", "dfb_mean"]


@dataclass
class PreparedSlide:
    wsi_id: str
    mask: np.ndarray
    dfb: np.ndarray
    patches: List[PatchRecord]

    @property
    def max_dfb(self) -> float:
        return max_dfb(self.dfb)


def prepare_slide(
    wsi_id: str,
    image,
    gt,
    factor: int,
    patch_size: int,
    stride: Optional[int] = None,
    thresholds: Optional[HsvThresholds] = None,
    min_area: int = DEFAULT_MIN_AREA,
    max_hole_area: int = DEFAULT_MAX_HOLE_AREA,
    dfb_method: str = "chamfer",
    border_is_tissue: bool = False,
) -> PreparedSlide:
    """Mask, DfB and single-class patches for one slide."""
    mask = tissue_mask(image, factor, thresholds, min_area, max_hole_area)
    dfb = distance_transform(mask, dfb_method, border_is_tissue)
    patches = extract_patches(wsi_id, image, dfb, gt, factor, patch_size, stride)
    return PreparedSlide(wsi_id, mask, dfb, patches)


@dataclass
class Prediction:
    wsi_id: str
    x: int
    y: int
    true_label: int
    pred_label: int
    dfb_mean: float


def write_predictions(path, preds: Sequence[Prediction]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(PREDICTION_FIELDS)
        for p in preds:
            writer.writerow(
                [p.wsi_id, p.x, p.y, CLASS_NAMES[p.true_label], CLASS_NAMES[p.pred_label], repr(float(p.dfb_mean))]
            )


def read_predictions(path) -> List[Prediction]:
    out = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(PREDICTION_FIELDS) - set(reader.fieldnames or [])
        if missing:
            raise ValueError(f"{path}: missing columns {sorted(missing)}")
        for row in reader:
            out.append(
                Prediction(
                    row["wsi_id"],
                    int(row["x"]),
                    int(row["y"]),
                    class_index(row["true_label"]),
                    class_index(row["pred_label"]),
                    float(row["dfb_mean"]),
                )
            )
    return out


def predictions_confusion(preds: Sequence[Prediction]) -> np.ndarray:
    return confusion([p.true_label for p in preds], [p.pred_label for p in preds])


def predictions_curve(preds: Sequence[Prediction], bin_width: float = 1.0, average: str = "macro"):
    return recall_by_distance(
        [p.dfb_mean for p in preds],
        [p.true_label for p in preds],
        [p.pred_label for p in preds],
        bin_width,
        average,
    )


def _patch_set(slides: Dict[str, PreparedSlide], ids) -> M.PatchSet:
    return M.PatchSet.from_records([r for w in ids for r in slides[w].patches])


def _predict(net: M.NetworkState, slides, ids) -> List[Prediction]:
    records = [r for w in ids for r in slides[w].patches]
    if not records:
        return []
    data = M.PatchSet.from_records(records)
    pred = M.predict_proba(net, data.images, data.dfb).argmax(axis=1)
    return [
        Prediction(r.wsi_id, r.rect.x, r.rect.y, r.label, int(p), r.dfb_mean)
        for r, p in zip(records, pred)
    ]


@dataclass
class FoldResult:
    fold: FoldSplit
    predictions: Dict[str, List[Prediction]]
    histories: Dict[str, List[dict]]
    networks: Dict[str, M.NetworkState] = field(repr=False, default_factory=dict)


def run_fold(
    slides: Dict[str, PreparedSlide],
    split: FoldSplit,
    arms: Sequence[str] = ARMS,
    cfg: Optional[M.TrainConfig] = None,
    spec: Optional[M.ArchSpec] = None,
) -> FoldResult:
    """Train the requested arms on one split and predict its test slides.

    The transfer arm fine-tunes the baseline of the same fold, so it forces
    the baseline to be trained.
    """
    cfg = cfg or M.TrainConfig()
    unknown = set(arms) - set(ARMS)
    if unknown:
        raise ValueError(f"unknown arms {sorted(unknown)}")
    norm = cfg.dfb_norm or max(1.0, max(slides[w].max_dfb for w in split.train_wsis))
    fold_cfg = M.TrainConfig(**{**cfg.__dict__, "dfb_norm": norm, "seed": cfg.seed + 1000 * split.fold_index})
    train_set = _patch_set(slides, split.train_wsis)
    val_set = _patch_set(slides, split.val_wsis)

    nets, hists = {}, {}
    needed = list(arms)
    if "dfb_fc_transfer" in needed and "baseline" not in needed:
        needed.insert(0, "baseline")
    for arm in needed:
        if arm == "dfb_fc_transfer":
            init = M.transfer_init(M.FusionMode.DFB_FEATURE, nets["baseline"])
            nets[arm], hists[arm] = M.train(M.FusionMode.DFB_FEATURE, train_set, val_set, fold_cfg, spec, init=init)
        else:
            nets[arm], hists[arm] = M.train(arm, train_set, val_set, fold_cfg, spec)
        log.info("fold %d %s: %d epochs", split.fold_index, arm, len(hists[arm]))
    preds = {arm: _predict(nets[arm], slides, split.test_wsis) for arm in arms}
    return FoldResult(split, preds, {a: hists[a] for a in arms}, {a: nets[a] for a in arms})


@dataclass
class BenchmarkResult:
    folds: List[FoldResult]

    def predictions(self, arm: str) -> List[Prediction]:
        return [p for f in self.folds for p in f.predictions[arm]]

    def confusion(self, arm: str) -> np.ndarray:
        return predictions_confusion(self.predictions(arm))

    def report(self, arm: str) -> MetricsReport:
        return compute_metrics(self.confusion(arm))

    def arms(self) -> List[str]:
        return list(self.folds[0].predictions) if self.folds else []

    def curve(self, arm: str, bin_width: float = 1.0, average: str = "macro"):
        return predictions_curve(self.predictions(arm), bin_width, average)

    def curve_gain(self, arm: str, reference: str = "baseline", bin_width: float = 1.0):
        return curve_difference(self.curve(arm, bin_width), self.curve(reference, bin_width))


def run_cross_validation(
    slides: Dict[str, PreparedSlide],
    k: int = 5,
    seed: int = 0,
    arms: Sequence[str] = ARMS,
    cfg: Optional[M.TrainConfig] = None,
    spec: Optional[M.ArchSpec] = None,
    folds: Optional[Sequence[FoldSplit]] = None,
) -> BenchmarkResult:
    folds = list(folds) if folds is not None else split_folds(sorted(slides), k, seed)
    return BenchmarkResult([run_fold(slides, f, arms, cfg, spec) for f in folds])


def prepare_synthetic(cfg, dfb_method: str = "chamfer") -> Dict[str, PreparedSlide]:
    """Render a :class:`~dfbpath.synth.SynthConfig` in memory and prepare
    every slide through the regular masking pipeline."""
    from .synth import generate_wsi

    p = cfg.params
    slides = {}
    for i, wsi in enumerate(cfg.slide_ids()):
        rgb, labels, _ = generate_wsi(cfg.slide_params(i))
        slides[wsi] = prepare_slide(wsi, rgb, labels, p.factor, p.patch_size, dfb_method=dfb_method)
    return slides


BENCHMARK_ARMS = ("baseline", "dfb_fc_transfer")


def run_benchmark(synth_cfg, arms: Sequence[str] = BENCHMARK_ARMS, k: int = 5, cfg: Optional[M.TrainConfig] = None):
    """k-fold comparison on a synthetic slide set.

    Returns the :class:`BenchmarkResult` and the generator's ``lesion_band``,
    the distance beyond which only non-neoplastic tissue exists.
    """
    slides = prepare_synthetic(synth_cfg)
    cfg = cfg or M.TrainConfig(seed=synth_cfg.seed)
    return run_cross_validation(slides, k, synth_cfg.seed, arms, cfg), synth_cfg.params.lesion_band
