"""``dfbpath`` command line.

Every command reads an optional flat JSON config (``--config``); explicit
flags win over config values. Outputs go under the work directory
(``--workdir``, else ``$DFBPATH_WORKDIR``, else the current directory) and
each command leaves ``provenance/<command>.json`` behind.

Exit codes: 0 ok, 2 missing input, 3 invalid config, 4 failed check or
busy work directory.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import platform
import sys
from contextlib import contextmanager
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import __version__
from . import model as M
from .dataset import read_folds, split_folds, write_folds
from .distance import distance_transform, max_dfb, read_dfb_png, write_dfb_bin, write_dfb_png
from .experiment import (
    ARMS,
    Prediction,
    prepare_slide,
    predictions_confusion,
    predictions_curve,
    read_predictions,
    run_cross_validation,
    write_predictions,
)
from .imgproc import HsvThresholds, read_mask, read_rgb, tissue_mask, write_mask, write_rgb
from .metrics import (
    compute_metrics,
    curve_difference,
    dfb_class_histogram,
    format_table,
    write_curve_csv,
    write_metrics_csv,
    write_metrics_json,
)
from .synth import SynthConfig, SynthParams, read_slides, write_dataset
from .tiling import (
    CLASS_NAMES,
    colourize,
    export_tiles,
    extract_patches,
    map_to_lowres,
    read_label_image,
    read_manifest,
    stitch_prediction_map,
    write_label_image,
    write_manifest,
)

log = logging.getLogger("dfbpath")

EXIT_MISSING, EXIT_CONFIG, EXIT_CHECK = 2, 3, 4

SYNTH_PREFIX = "synth_"
DEFAULTS = {
    "seed": 0,
    "factor": 16,
    "patch_size": 256,
    "stride": None,
    "sat_min": 0.07,
    "val_max": 0.95,
    "hue_range": None,
    "min_area": 64,
    "max_hole_area": 256,
    "dfb_method": "chamfer",
    "border_is_tissue": False,
    "mode": "baseline",
    "learning_rate": 1e-3,
    "patience": 5,
    "max_epochs": 30,
    "batch_size": 8,
    "dfb_norm": None,
    "conv_channels": [16, 32, 64],
    "fc_widths": [32],
    "k": 5,
    "n_slides": 40,
    "bin_width": 1.0,
}
DEFAULTS.update({SYNTH_PREFIX + f.name: None for f in fields(SynthParams) if f.name != "seed"})


class ConfigError(ValueError):
    pass


class BusyError(RuntimeError):
    pass


def load_config(path) -> dict:
    cfg = dict(DEFAULTS)
    if path is None:
        return cfg
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file {path} not found")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be an object")
    unknown = set(data) - set(DEFAULTS) - {"workdir"}
    if unknown:
        raise ConfigError(f"{path}: unknown keys {sorted(unknown)}")
    cfg.update(data)
    return cfg


def effective_config(args) -> dict:
    cfg = load_config(args.config)
    for key, value in vars(args).items():
        if key in DEFAULTS and value is not None:
            cfg[key] = value
    return cfg


def config_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()


def _thresholds(cfg) -> HsvThresholds:
    try:
        hue = tuple(cfg["hue_range"]) if cfg["hue_range"] is not None else None
        return HsvThresholds(float(cfg["sat_min"]), float(cfg["val_max"]), hue)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def _train_config(cfg) -> M.TrainConfig:
    try:
        return M.TrainConfig(
            learning_rate=float(cfg["learning_rate"]),
            patience=int(cfg["patience"]),
            max_epochs=int(cfg["max_epochs"]),
            batch_size=int(cfg["batch_size"]),
            seed=int(cfg["seed"]),
            dfb_norm=None if cfg["dfb_norm"] is None else float(cfg["dfb_norm"]),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def _arch(cfg) -> M.ArchSpec:
    try:
        return M.ArchSpec(tuple(int(c) for c in cfg["conv_channels"]), tuple(int(c) for c in cfg["fc_widths"]))
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def _synth_config(cfg) -> SynthConfig:
    overrides = {
        k[len(SYNTH_PREFIX):]: v for k, v in cfg.items() if k.startswith(SYNTH_PREFIX) and v is not None
    }
    try:
        params = SynthParams.from_dict({**SynthParams().to_dict(), **overrides})
        return SynthConfig(n_slides=int(cfg["n_slides"]), seed=int(cfg["seed"]), params=params)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def workdir(args) -> Path:
    wd = args.workdir or os.environ.get("DFBPATH_WORKDIR") or "."
    path = Path(wd)
    path.mkdir(parents=True, exist_ok=True)
    return path


@contextmanager
def locked(wd: Path):
    """Advisory lock: one writing command per work directory."""
    lock = wd / ".dfbpath.lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise BusyError(f"{wd} is locked by another command ({lock})") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


def write_provenance(wd: Path, command: str, cfg: dict, extra=None) -> None:
    record = {
        "command": command,
        "config": cfg,
        "config_hash": config_hash(cfg),
        "seed": cfg.get("seed"),
        "versions": {
            "dfbpath": __version__,
            "numpy": np.__version__,
            "python": platform.python_version(),
        },
    }
    if extra:
        record.update(extra)
    out = wd / "provenance"
    out.mkdir(exist_ok=True)
    (out / f"{command}.json").write_text(json.dumps(record, indent=2, sort_keys=True, default=str) + "\n")


def _require(path) -> Path:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"{path} not found")
    return path


def _slides(wd: Path):
    return read_slides(_require(wd / "slides.csv"))


# -- commands ----------------------------------------------------------------


def cmd_synth(args, cfg, wd):
    sc = _synth_config(cfg)
    write_dataset(wd, sc)
    log.info("wrote %d synthetic slides to %s", sc.n_slides, wd)
    return {"n_slides": sc.n_slides}


def cmd_mask(args, cfg, wd):
    thresholds = _thresholds(cfg)
    if args.image:
        img = read_rgb(_require(args.image))
        mask = tissue_mask(img, int(cfg["factor"]), thresholds, int(cfg["min_area"]), int(cfg["max_hole_area"]))
        out = Path(args.out or wd / (Path(args.image).stem + "_mask.png"))
        write_mask(out, mask)
        return {"outputs": [str(out)]}
    out_dir = wd / "masks"
    out_dir.mkdir(exist_ok=True)
    for row in _slides(wd):
        img = read_rgb(_require(row["image"]))
        mask = tissue_mask(img, row["factor"], thresholds, int(cfg["min_area"]), int(cfg["max_hole_area"]))
        write_mask(out_dir / f"{row['wsi_id']}.png", mask)
    return {}


def _dfb_for(mask, cfg):
    return distance_transform(mask, cfg["dfb_method"], bool(cfg["border_is_tissue"]))


def cmd_dfb(args, cfg, wd):
    if args.mask:
        dfb = _dfb_for(read_mask(_require(args.mask)), cfg)
        out = Path(args.out or wd / (Path(args.mask).stem + "_dfb.png"))
        write_dfb_png(out, dfb)
        write_dfb_bin(out.with_suffix(".bin"), dfb)
        print(f"max DfB {max_dfb(dfb):.4f}")
        return {"max_dfb": max_dfb(dfb)}
    out_dir = wd / "dfb"
    out_dir.mkdir(exist_ok=True)
    maxima = {}
    for row in _slides(wd):
        dfb = _dfb_for(read_mask(_require(wd / "masks" / f"{row['wsi_id']}.png")), cfg)
        write_dfb_png(out_dir / f"{row['wsi_id']}.png", dfb)
        write_dfb_bin(out_dir / f"{row['wsi_id']}.bin", dfb)
        maxima[row["wsi_id"]] = max_dfb(dfb)
    return {"max_dfb": maxima}


def _load_dfb(wd, wsi_id):
    from .distance import read_dfb_bin

    return read_dfb_bin(_require(wd / "dfb" / f"{wsi_id}.bin"))


def cmd_tile(args, cfg, wd):
    slides = _slides(wd)
    records = []
    for row in slides:
        patch = int(row.get("patch_size") or cfg["patch_size"])
        img = read_rgb(_require(row["image"]))
        gt = read_label_image(_require(row["gt"]))
        dfb = _load_dfb(wd, row["wsi_id"])
        recs = extract_patches(
            row["wsi_id"], img, dfb, gt, row["factor"], patch, cfg["stride"], with_pixels=args.export_tiles
        )
        if args.export_tiles:
            export_tiles(wd, recs)
        records.extend(recs)
    write_manifest(wd / "patches.csv", records)
    splits = split_folds([r["wsi_id"] for r in slides], int(cfg["k"]), int(cfg["seed"]))
    write_folds(wd / "folds.csv", splits)
    counts = np.bincount([r.label for r in records], minlength=len(CLASS_NAMES))
    log.info("%d patches: %s", len(records), dict(zip(CLASS_NAMES, counts.tolist())))
    return {"n_patches": len(records)}


def _attach_pixels(wd, records):
    by_slide = {}
    for r in records:
        by_slide.setdefault(r.wsi_id, []).append(r)
    slide_rows = {row["wsi_id"]: row for row in _slides(wd)}
    for wsi, recs in by_slide.items():
        img = read_rgb(_require(slide_rows[wsi]["image"]))
        for r in recs:
            r.image = img[r.rect.slices()].copy()
    return records


def _norm_for(wd, wsi_ids, cfg):
    if cfg["dfb_norm"] is not None:
        return float(cfg["dfb_norm"])
    return max(1.0, max(max_dfb(_load_dfb(wd, w)) for w in wsi_ids))


def cmd_train(args, cfg, wd):
    records = read_manifest(_require(wd / "patches.csv"))
    splits = read_folds(_require(wd / "folds.csv"))
    if not 0 <= args.fold < len(splits):
        raise ConfigError(f"fold {args.fold} not in 0..{len(splits) - 1}")
    split = splits[args.fold]
    mode = M.FusionMode.parse(cfg["mode"])
    records = _attach_pixels(wd, records)
    pick = lambda ids: M.PatchSet.from_records([r for r in records if r.wsi_id in set(ids)])
    train_set, val_set = pick(split.train_wsis), pick(split.val_wsis)
    tc = _train_config(cfg)
    init = None
    if args.transfer_from:
        base = M.load_checkpoint(_require(args.transfer_from))
        init = M.transfer_init(mode, base)
        tc.dfb_norm = tc.dfb_norm or base.dfb_norm
    else:
        tc.dfb_norm = _norm_for(wd, split.train_wsis, cfg)
    tc.seed = tc.seed + 1000 * args.fold
    spec = _arch(cfg)

    if init is None:
        start = M.init_network(mode, spec, seed=tc.seed, dfb_norm=tc.dfb_norm)
    else:
        start = init
    initial = {"epoch": 0, "train_loss": "", "val_mrecall": M.evaluate_mrecall(start, val_set), "best_flag": 0}
    net, history = M.train(mode, train_set, val_set, tc, spec, init=init)

    name = args.name or f"{mode.value}{'_transfer' if args.transfer_from else ''}_fold{args.fold}"
    out = wd / "runs" / name
    out.mkdir(parents=True, exist_ok=True)
    M.save_checkpoint(out / "model.ckpt", net)
    with open(out / "log.csv", "w") as fh:
        fh.write("epoch,train_loss,val_mrecall,best_flag\n")
        for row in [initial] + history:
            loss = "" if row["train_loss"] == "" else repr(row["train_loss"])
            fh.write(f"{row['epoch']},{loss},{row['val_mrecall']!r},{row['best_flag']}\n")
    test = [r for r in records if r.wsi_id in set(split.test_wsis)]
    preds = []
    if test:
        data = M.PatchSet.from_records(test)
        y = M.predict_proba(net, data.images, data.dfb).argmax(axis=1)
        preds = [Prediction(r.wsi_id, r.rect.x, r.rect.y, r.label, int(p), r.dfb_mean) for r, p in zip(test, y)]
    write_predictions(out / "predictions.csv", preds)
    print(f"{name}: {len(history)} epochs, best val mRecall {max(h['val_mrecall'] for h in history):.4f}")
    return {"run": name, "initial_val_mrecall": initial["val_mrecall"]}


def cmd_eval(args, cfg, wd):
    reports, confusions = {}, {}
    names = args.names or [Path(p).parent.name or Path(p).stem for p in args.predictions]
    if len(names) != len(args.predictions):
        raise ConfigError("--names must match the number of --predictions")
    grouped = {}
    for name, path in zip(names, args.predictions):
        grouped.setdefault(name, []).extend(read_predictions(_require(path)))
    for name, preds in grouped.items():
        confusions[name] = predictions_confusion(preds)
        reports[name] = compute_metrics(confusions[name])
    out = Path(args.out) if args.out else wd / "eval"
    out.mkdir(parents=True, exist_ok=True)
    write_metrics_csv(out / "metrics.csv", reports)
    write_metrics_json(out / "metrics.json", reports, confusions)
    print(format_table(reports))
    return {}


def cmd_predmap(args, cfg, wd):
    net = M.load_checkpoint(_require(args.ckpt))
    rows = {row["wsi_id"]: row for row in _slides(wd)}
    if args.wsi not in rows:
        raise FileNotFoundError(f"slide {args.wsi} not in slides.csv")
    row = rows[args.wsi]
    img = read_rgb(_require(row["image"]))
    gt = read_label_image(_require(row["gt"])) if args.mask_nolabel else None
    tissue = read_mask(_require(wd / "masks" / f"{args.wsi}.png"))
    dfb = _load_dfb(wd, args.wsi)
    patch = int(row.get("patch_size") or cfg["patch_size"])
    recs = extract_patches(args.wsi, img, dfb, None, row["factor"], patch, cfg["stride"], tissue=tissue, single_class=False)
    preds = []
    if recs:
        data = M.PatchSet(np.stack([r.image for r in recs]), [r.dfb_mean for r in recs], np.zeros(len(recs)))
        preds = M.predict_proba(net, data.images, data.dfb).argmax(axis=1).tolist()
    grid = [map_to_lowres(r.rect, row["factor"], tissue.shape) for r in recs]
    labels = stitch_prediction_map(grid, preds, tissue, gt)
    out = wd / "predmaps"
    out.mkdir(exist_ok=True)
    stem = args.name or f"{args.wsi}_{net.mode.value}"
    write_label_image(out / f"{stem}.png", labels)
    write_rgb(out / f"{stem}_colour.png", colourize(labels))
    return {"n_patches": len(recs)}


def cmd_analyze(args, cfg, wd):
    out = Path(args.out) if args.out else wd / "analysis"
    out.mkdir(parents=True, exist_ok=True)
    bw = float(cfg["bin_width"])
    if args.patches:
        recs = read_manifest(_require(args.patches))
        recs = [r for r in recs if r.label is not None]
        hist = dfb_class_histogram([r.dfb_mean for r in recs], [r.label for r in recs], bw)
        for c, h in hist.items():
            write_curve_csv(out / f"dfb_hist_{CLASS_NAMES[c]}.csv", h, bw)
        for c, h in hist.items():
            top = (max(h) + 1) * bw if h else 0.0
            print(f"{CLASS_NAMES[c]}: DfB range 0 - {top:g}")
    if args.predictions:
        curve = predictions_curve(read_predictions(_require(args.predictions)), bw, args.average)
        write_curve_csv(out / "recall_by_distance.csv", curve, bw)
        if args.reference:
            ref = predictions_curve(read_predictions(_require(args.reference)), bw, args.average)
            diff = curve_difference(curve, ref)
            write_curve_csv(out / "recall_difference.csv", diff, bw)
            if diff:
                print(f"mean recall difference over {len(diff)} bins: {np.mean(list(diff.values())):+.4f}")
    return {}


def cmd_benchmark(args, cfg, wd):
    """Synthetic k-fold comparison of all arms, entirely in memory."""
    from .experiment import prepare_synthetic

    sc = _synth_config(cfg)
    slides = prepare_synthetic(sc, cfg["dfb_method"])
    arms = args.arms.split(",") if args.arms else list(ARMS)
    res = run_cross_validation(slides, int(cfg["k"]), int(cfg["seed"]), arms, _train_config(cfg), _arch(cfg))
    reports = {a: res.report(a) for a in arms}
    out = wd / "benchmark"
    out.mkdir(parents=True, exist_ok=True)
    write_metrics_csv(out / "metrics.csv", reports)
    write_metrics_json(out / "metrics.json", reports, {a: res.confusion(a) for a in arms})
    for a in arms:
        write_predictions(out / f"predictions_{a}.csv", res.predictions(a))
        if a != "baseline" and "baseline" in arms:
            write_curve_csv(out / f"recall_difference_{a}.csv", res.curve_gain(a), float(cfg["bin_width"]))
    print(format_table(reports))
    return {}


COMMANDS = {
    "synth": cmd_synth,
    "mask": cmd_mask,
    "dfb": cmd_dfb,
    "tile": cmd_tile,
    "train": cmd_train,
    "eval": cmd_eval,
    "predmap": cmd_predmap,
    "analyze": cmd_analyze,
    "benchmark": cmd_benchmark,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dfbpath", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"dfbpath {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat JSON config file")
    common.add_argument("--workdir", help="work directory (default $DFBPATH_WORKDIR or .)")
    common.add_argument("--seed", type=int)
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="render a synthetic slide set")
    p.add_argument("--n-slides", dest="n_slides", type=int)

    p = sub.add_parser("mask", parents=[common], help="tissue masks from RGB slides")
    p.add_argument("--image", help="single image instead of the slide manifest")
    p.add_argument("--out")
    p.add_argument("--factor", type=int)

    p = sub.add_parser("dfb", parents=[common], help="distance-from-boundary images")
    p.add_argument("--mask", help="single mask instead of the slide manifest")
    p.add_argument("--out")
    p.add_argument("--method", dest="dfb_method", choices=["chamfer", "exact"])
    p.add_argument("--border-is-tissue", dest="border_is_tissue", action="store_true", default=None)

    p = sub.add_parser("tile", parents=[common], help="patch manifest and fold split")
    p.add_argument("--patch-size", dest="patch_size", type=int)
    p.add_argument("--stride", type=int)
    p.add_argument("--k", type=int)
    p.add_argument("--export-tiles", action="store_true")

    for name, helptext in (("train", "train one fold"), ("benchmark", "synthetic k-fold comparison")):
        p = sub.add_parser(name, parents=[common], help=helptext)
        p.add_argument("--learning-rate", dest="learning_rate", type=float)
        p.add_argument("--patience", type=int)
        p.add_argument("--max-epochs", dest="max_epochs", type=int)
        p.add_argument("--batch-size", dest="batch_size", type=int)
        p.add_argument("--dfb-norm", dest="dfb_norm", type=float)
    train = sub.choices["train"]
    train.add_argument("--mode", choices=[m.value for m in M.FusionMode])
    train.add_argument("--transfer-from", dest="transfer_from", help="baseline checkpoint")
    train.add_argument("--fold", type=int, default=0)
    train.add_argument("--name", help="run directory name under runs/")
    bench = sub.choices["benchmark"]
    bench.add_argument("--arms", help=f"comma-separated subset of {','.join(ARMS)}")
    bench.add_argument("--n-slides", dest="n_slides", type=int)
    bench.add_argument("--k", type=int)

    p = sub.add_parser("eval", parents=[common], help="metrics from prediction CSVs")
    p.add_argument("--predictions", nargs="+", required=True)
    p.add_argument("--names", nargs="+", help="method name per predictions file (repeat to pool folds)")
    p.add_argument("--out")

    p = sub.add_parser("predmap", parents=[common], help="stitched prediction map for one slide")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--wsi", required=True)
    p.add_argument("--mask-nolabel", action="store_true", help="also blank unannotated GT areas")
    p.add_argument("--name")

    p = sub.add_parser("analyze", parents=[common], help="DfB histograms and recall-by-distance curves")
    p.add_argument("--patches")
    p.add_argument("--predictions")
    p.add_argument("--reference", help="predictions to subtract (e.g. the baseline)")
    p.add_argument("--average", choices=["macro", "micro"], default="macro")
    p.add_argument("--bin-width", dest="bin_width", type=float)
    p.add_argument("--out")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s"
    )
    try:
        cfg = effective_config(args)
        wd = workdir(args)
        with locked(wd):
            extra = COMMANDS[args.command](args, cfg, wd) or {}
            write_provenance(wd, args.command, cfg, extra)
    except FileNotFoundError as exc:
        print(f"dfbpath: error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except ConfigError as exc:
        print(f"dfbpath: invalid config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (BusyError, ValueError, AssertionError) as exc:
        print(f"dfbpath: error: {exc}", file=sys.stderr)
        return EXIT_CHECK
    return 0


if __name__ == "__main__":
    sys.exit(main())
