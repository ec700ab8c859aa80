"""A compact numpy CNN patch classifier with optional DfB fusion.

Layout is NHWC, arithmetic is float64. Three fusion modes share one
backbone (conv -> ReLU -> 2x2 max-pool blocks, global average pool, FC
layers, softmax):

* ``baseline``: RGB only.
* ``dfb_cnn``: a fourth input channel filled with the normalised mean DfB.
* ``dfb_fc``: the normalised mean DfB appended to the pooled feature vector.

The DfB contribution is always computed on its own and added, so a network
whose DfB weights are zero reproduces the RGB-only computation exactly.
"""

from __future__ import annotations

import enum
import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from .dataset import balance_indices, random_flips
from .metrics import compute_metrics, confusion
from .tiling import N_CLASSES

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-12
CKPT_MAGIC = b"DFBCKPT\x00"
CKPT_VERSION = 1


class FusionMode(str, enum.Enum):
    BASELINE = "baseline"
    DFB_CHANNEL = "dfb_cnn"
    DFB_FEATURE = "dfb_fc"

    @classmethod
    def parse(cls, value) -> "FusionMode":
        if isinstance(value, cls):
            return value
        aliases = {"method1": cls.DFB_CHANNEL, "method2": cls.DFB_FEATURE}
        key = str(value).lower()
        if key in aliases:
            return aliases[key]
        return cls(key)


@dataclass(frozen=True)
class ArchSpec:
    conv_channels: Tuple[int, ...] = (16, 32, 64)
    fc_widths: Tuple[int, ...] = (32,)
    n_classes: int = N_CLASSES
    kernel: int = 3

    @property
    def feature_dim(self) -> int:
        return self.conv_channels[-1]

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "ArchSpec":
        return cls(
            conv_channels=tuple(d["conv_channels"]),
            fc_widths=tuple(d["fc_widths"]),
            n_classes=int(d["n_classes"]),
            kernel=int(d["kernel"]),
        )


@dataclass
class NetworkState:
    """Weights, Adam moments and step counter of one classifier."""

    mode: FusionMode
    spec: ArchSpec
    params: Dict[str, np.ndarray]
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0
    dfb_norm: float = 1.0

    @property
    def in_channels(self) -> int:
        return 4 if self.mode is FusionMode.DFB_CHANNEL else 3

    def copy(self) -> "NetworkState":
        return NetworkState(
            self.mode,
            self.spec,
            {k: p.copy() for k, p in self.params.items()},
            {k: p.copy() for k, p in self.m.items()},
            {k: p.copy() for k, p in self.v.items()},
            self.t,
            self.dfb_norm,
        )

    def reset_optimizer(self) -> None:
        self.m = {k: np.zeros_like(p) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p) for k, p in self.params.items()}
        self.t = 0


def param_shapes(mode: FusionMode, spec: ArchSpec) -> Dict[str, tuple]:
    mode = FusionMode.parse(mode)
    shapes = {}
    c_in = 4 if mode is FusionMode.DFB_CHANNEL else 3
    k = spec.kernel
    for i, c_out in enumerate(spec.conv_channels):
        shapes[f"conv{i}.W"] = (c_out, c_in, k, k)
        shapes[f"conv{i}.b"] = (c_out,)
        c_in = c_out
    width = spec.feature_dim + (1 if mode is FusionMode.DFB_FEATURE else 0)
    for j, out in enumerate(spec.fc_widths + (spec.n_classes,)):
        shapes[f"fc{j}.W"] = (out, width)
        shapes[f"fc{j}.b"] = (out,)
        width = out
    return shapes


def init_network(
    mode=FusionMode.BASELINE, spec: Optional[ArchSpec] = None, seed: int = 0, dfb_norm: float = 1.0
) -> NetworkState:
    """He-normal weights scaled by fan-in, zero biases."""
    mode = FusionMode.parse(mode)
    spec = spec or ArchSpec()
    if dfb_norm <= 0:
        raise ValueError("dfb_norm must be > 0")
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(mode, spec).items():
        if name.endswith(".b"):
            params[name] = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[1:]))
            params[name] = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
    state = NetworkState(mode, spec, params, dfb_norm=float(dfb_norm))
    state.reset_optimizer()
    return state


# -- inputs ------------------------------------------------------------------


def build_input(mode, tile, dfb_mean: float, dfb_norm: float):
    """Network input for one RGB tile: ``(tensor HxWxC, aux or None)``."""
    x, aux = build_batch(mode, np.asarray(tile)[None], np.array([dfb_mean]), dfb_norm)
    return x[0], (None if aux is None else float(aux[0]))


def build_batch(mode, tiles, dfb_means, dfb_norm: float):
    """Scale pixels to [0, 1] and attach the normalised DfB per ``mode``."""
    mode = FusionMode.parse(mode)
    if dfb_norm <= 0:
        raise ValueError("dfb_norm must be > 0")
    tiles = np.asarray(tiles)
    if tiles.ndim != 4 or tiles.shape[-1] != 3:
        raise ValueError(f"expected (N, H, W, 3) tiles, got {tiles.shape}")
    x = tiles.astype(np.float64) / 255.0
    if mode is FusionMode.BASELINE:
        return x, None
    if dfb_means is None:
        raise ValueError(f"mode {mode.value} needs DfB values")
    d = np.asarray(dfb_means, dtype=np.float64).reshape(-1) / dfb_norm
    if d.size != len(x):
        raise ValueError(f"{len(x)} tiles but {d.size} DfB values")
    if mode is FusionMode.DFB_CHANNEL:
        chan = np.broadcast_to(d[:, None, None, None], x.shape[:3] + (1,))
        return np.concatenate([x, chan], axis=-1), None
    return x, d


# -- layers ------------------------------------------------------------------


def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    pad = k // 2
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(1, 2))
    n, h, w = x.shape[:3]
    # (N, H, W, C, k, k) -> rows of C*k*k, matching W.reshape(F, -1)
    return win.reshape(n * h * w, -1)


def _col2im(dcols: np.ndarray, shape: tuple, k: int) -> np.ndarray:
    n, h, w, c = shape
    pad = k // 2
    d = dcols.reshape(n, h, w, c, k, k)
    dxp = np.zeros((n, h + 2 * pad, w + 2 * pad, c))
    for i in range(k):
        for j in range(k):
            dxp[:, i : i + h, j : j + w, :] += d[..., i, j]
    return dxp[:, pad : pad + h, pad : pad + w, :]


def _maxpool(x: np.ndarray):
    n, h, w, c = x.shape
    h2, w2 = h // 2, w // 2
    x = x[:, : h2 * 2, : w2 * 2]
    blocks = x.reshape(n, h2, 2, w2, 2, c).transpose(0, 1, 3, 5, 2, 4).reshape(n, h2, w2, c, 4)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]
    return out, (arg, (n, h, w, c))


def _maxpool_backward(dout: np.ndarray, cache) -> np.ndarray:
    arg, (n, h, w, c) = cache
    h2, w2 = dout.shape[1:3]
    dblocks = np.zeros((n, h2, w2, c, 4))
    np.put_along_axis(dblocks, arg[..., None], dout[..., None], axis=-1)
    d = dblocks.reshape(n, h2, w2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(n, h2 * 2, w2 * 2, c)
    if d.shape[1:3] != (h, w):
        d = np.pad(d, ((0, 0), (0, h - h2 * 2), (0, w - w2 * 2), (0, 0)))
    return d


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(probs, true_class) -> np.ndarray:
    """``-ln p[true]`` with ``p`` floored at 1e-12; vectorised over rows."""
    probs = np.asarray(probs, dtype=np.float64)
    idx = np.asarray(true_class, dtype=int)
    p = np.take_along_axis(np.atleast_2d(probs), np.atleast_1d(idx)[:, None], axis=-1)[:, 0]
    loss = -np.log(np.maximum(p, PROB_FLOOR))
    return loss if probs.ndim == 2 else float(loss[0])


def _check_input(net: NetworkState, x, aux):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4 or x.shape[-1] != net.in_channels:
        raise ValueError(
            f"{net.mode.value} network expects {net.in_channels}-channel NHWC input, got {x.shape}"
        )
    if net.mode is FusionMode.DFB_FEATURE:
        if aux is None:
            raise ValueError("dfb_fc network needs the DfB scalar")
        aux = np.asarray(aux, dtype=np.float64).reshape(-1)
        if aux.size != len(x):
            raise ValueError(f"{len(x)} inputs but {aux.size} DfB scalars")
    elif aux is not None:
        raise ValueError(f"{net.mode.value} network takes no DfB scalar")
    return x, aux


def _forward(net: NetworkState, x, aux, keep_cache: bool):
    p = net.params
    spec = net.spec
    k = spec.kernel
    caches = []
    h = x
    for i in range(len(spec.conv_channels)):
        W, b = p[f"conv{i}.W"], p[f"conv{i}.b"]
        n, hh, ww, c = h.shape
        if i == 0 and net.mode is FusionMode.DFB_CHANNEL:
            cols = _im2col(h[..., :3], k)
            cols_d = _im2col(h[..., 3:], k)
            z = cols @ W[:, :3].reshape(len(W), -1).T + cols_d @ W[:, 3:].reshape(len(W), -1).T
            cols = (cols, cols_d)
        else:
            cols = _im2col(h, k)
            z = cols @ W.reshape(len(W), -1).T
        z = (z + b).reshape(n, hh, ww, -1)
        a = np.maximum(z, 0.0)
        pooled, pcache = _maxpool(a)
        if keep_cache:
            caches.append((cols, h.shape, z, pcache))
        h = pooled
    gap_shape = h.shape
    feat = h.mean(axis=(1, 2))
    fc_caches = []
    hidden = feat
    n_fc = len(spec.fc_widths) + 1
    for j in range(n_fc):
        W, b = p[f"fc{j}.W"], p[f"fc{j}.b"]
        if j == 0 and net.mode is FusionMode.DFB_FEATURE:
            d = spec.feature_dim
            z = hidden @ W[:, :d].T + aux[:, None] * W[:, d] + b
        else:
            z = hidden @ W.T + b
        if keep_cache:
            fc_caches.append((hidden, z))
        hidden = np.maximum(z, 0.0) if j < n_fc - 1 else z
    logits = hidden
    cache = (caches, gap_shape, fc_caches, aux) if keep_cache else None
    return logits, cache


def logits(net: NetworkState, x, aux=None) -> np.ndarray:
    x, aux = _check_input(net, x, aux)
    return _forward(net, x, aux, keep_cache=False)[0]


def forward(net: NetworkState, x, aux=None) -> np.ndarray:
    """Class probabilities, shape ``(N, n_classes)``."""
    return softmax(logits(net, x, aux))


def loss_and_grads(net: NetworkState, x, aux, y) -> Tuple[float, Dict[str, np.ndarray]]:
    """Mean cross-entropy over the batch and its exact gradient."""
    x, aux = _check_input(net, x, aux)
    y = np.asarray(y, dtype=int).reshape(-1)
    out, (caches, gap_shape, fc_caches, aux) = _forward(net, x, aux, keep_cache=True)
    probs = softmax(out)
    n = len(x)
    loss = float(np.mean(cross_entropy(probs, y)))
    p = net.params
    spec = net.spec
    grads = {}

    # softmax + CE: dL/dlogits = probs - onehot
    dz = probs.copy()
    dz[np.arange(n), y] -= 1.0
    dz /= n
    for j in reversed(range(len(fc_caches))):
        hidden, _ = fc_caches[j]
        W = p[f"fc{j}.W"]
        if j == 0 and net.mode is FusionMode.DFB_FEATURE:
            d = spec.feature_dim
            grads[f"fc{j}.W"] = np.concatenate([dz.T @ hidden, (dz.T @ aux)[:, None]], axis=1)
            dh = dz @ W[:, :d]
        else:
            grads[f"fc{j}.W"] = dz.T @ hidden
            dh = dz @ W
        grads[f"fc{j}.b"] = dz.sum(axis=0)
        if j > 0:
            dz = dh * (fc_caches[j - 1][1] > 0)
    _, gh, gw, _ = gap_shape
    dpool = np.broadcast_to(dh[:, None, None, :] / (gh * gw), gap_shape)

    k = spec.kernel
    for i in reversed(range(len(caches))):
        cols, in_shape, z, pcache = caches[i]
        da = _maxpool_backward(dpool, pcache)
        dzc = (da * (z > 0)).reshape(-1, z.shape[-1])
        W = p[f"conv{i}.W"]
        grads[f"conv{i}.b"] = dzc.sum(axis=0)
        if isinstance(cols, tuple):
            cols_rgb, cols_d = cols
            g_rgb = (dzc.T @ cols_rgb).reshape(len(W), 3, k, k)
            g_d = (dzc.T @ cols_d).reshape(len(W), -1, k, k)
            grads[f"conv{i}.W"] = np.concatenate([g_rgb, g_d], axis=1)
        else:
            grads[f"conv{i}.W"] = (dzc.T @ cols).reshape(W.shape)
        if i > 0:
            dcols = dzc @ W.reshape(len(W), -1)
            dpool = _col2im(dcols, in_shape, k)
    return loss, grads


def backward(net: NetworkState, x, aux, y) -> Dict[str, np.ndarray]:
    return loss_and_grads(net, x, aux, y)[1]


def adam_step(
    net: NetworkState,
    grads: Dict[str, np.ndarray],
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> NetworkState:
    """Bias-corrected Adam update, in place. Returns ``net``."""
    if not net.m:
        net.reset_optimizer()
    net.t += 1
    c1 = 1.0 - beta1**net.t
    c2 = 1.0 - beta2**net.t
    for name, g in grads.items():
        if g.shape != net.params[name].shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, expected {net.params[name].shape}")
        m = net.m[name]
        v = net.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        net.params[name] -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return net


def transfer_init(target_mode, baseline: NetworkState) -> NetworkState:
    """Start a DfB network from trained baseline weights.

    Every baseline tensor is copied; the new DfB input channel or feature
    column starts at zero so the initial predictions match the baseline.
    The optimizer state is fresh.
    """
    target = FusionMode.parse(target_mode)
    if baseline.mode is not FusionMode.BASELINE:
        raise ValueError(f"transfer source must be a baseline network, got {baseline.mode.value}")
    if target is FusionMode.BASELINE:
        raise ValueError("transfer target must be a DfB mode")
    shapes = param_shapes(target, baseline.spec)
    if set(shapes) != set(baseline.params):
        raise ValueError("architecture mismatch between baseline and target")
    params = {}
    for name, shape in shapes.items():
        src = baseline.params[name]
        if src.shape == shape:
            params[name] = src.copy()
        elif target is FusionMode.DFB_CHANNEL and name == "conv0.W":
            params[name] = np.concatenate([src, np.zeros(shape[:1] + (1,) + shape[2:])], axis=1)
        elif target is FusionMode.DFB_FEATURE and name == "fc0.W":
            params[name] = np.concatenate([src, np.zeros((shape[0], 1))], axis=1)
        else:
            raise ValueError(f"cannot transfer {name}: {src.shape} -> {shape}")
    state = NetworkState(target, baseline.spec, params, dfb_norm=baseline.dfb_norm)
    state.reset_optimizer()
    return state


# -- training ----------------------------------------------------------------


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    patience: int = 5
    max_epochs: int = 30
    batch_size: int = 8
    seed: int = 0
    dfb_norm: Optional[float] = None
    augment: bool = True

    def __post_init__(self):
        if self.learning_rate <= 0 or self.max_epochs < 1 or self.batch_size < 1:
            raise ValueError("learning_rate, max_epochs and batch_size must be positive")
        if self.patience < 0:
            raise ValueError("patience must be >= 0")
        if self.dfb_norm is not None and self.dfb_norm <= 0:
            raise ValueError("dfb_norm must be > 0")


@dataclass
class PatchSet:
    """Arrays for a set of patches: uint8 tiles, mean DfB, class index."""

    images: np.ndarray
    dfb: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.images = np.asarray(self.images)
        self.dfb = np.asarray(self.dfb, dtype=np.float64).reshape(-1)
        self.labels = np.asarray(self.labels, dtype=int).reshape(-1)
        if not (len(self.images) == len(self.dfb) == len(self.labels)):
            raise ValueError("images, dfb and labels must have equal length")

    def __len__(self):
        return len(self.labels)

    @classmethod
    def from_records(cls, records) -> "PatchSet":
        records = list(records)
        if not records:
            raise ValueError("no patches")
        return cls(
            np.stack([r.image for r in records]),
            [r.dfb_mean for r in records],
            [r.label for r in records],
        )


def predict_proba(net: NetworkState, images, dfb=None, batch_size: int = 64) -> np.ndarray:
    out = []
    for s in range(0, len(images), batch_size):
        sl = slice(s, s + batch_size)
        x, aux = build_batch(net.mode, images[sl], None if dfb is None else np.asarray(dfb)[sl], net.dfb_norm)
        out.append(forward(net, x, aux))
    if not out:
        return np.zeros((0, net.spec.n_classes))
    return np.concatenate(out)


def evaluate_mrecall(net: NetworkState, data: PatchSet) -> float:
    pred = predict_proba(net, data.images, data.dfb).argmax(axis=1)
    return compute_metrics(confusion(data.labels, pred, net.spec.n_classes)).m_recall


def train(
    mode,
    train_set: PatchSet,
    val_set: PatchSet,
    cfg: Optional[TrainConfig] = None,
    spec: Optional[ArchSpec] = None,
    init: Optional[NetworkState] = None,
) -> Tuple[NetworkState, List[dict]]:
    """Minibatch Adam with early stopping on validation mRecall.

    Each epoch rebalances and reshuffles the training set and applies random
    flips. The weights of the best epoch (strict improvement) are returned
    together with one log row per epoch. Training stops after ``patience``
    consecutive epochs without improvement, or at ``max_epochs``.
    """
    cfg = cfg or TrainConfig()
    mode = FusionMode.parse(mode)
    if len(train_set) == 0 or len(val_set) == 0:
        raise ValueError("training and validation sets must be non-empty")
    if init is not None:
        if init.mode is not mode:
            raise ValueError(f"initial network is {init.mode.value}, expected {mode.value}")
        net = init.copy()
        if cfg.dfb_norm is not None:
            net.dfb_norm = float(cfg.dfb_norm)
    else:
        norm = cfg.dfb_norm if cfg.dfb_norm is not None else max(float(train_set.dfb.max()), 1.0)
        net = init_network(mode, spec, seed=cfg.seed, dfb_norm=norm)

    best, best_score, wait = net.copy(), -np.inf, 0
    history = []
    for epoch in range(1, cfg.max_epochs + 1):
        rng = np.random.default_rng([cfg.seed, epoch])
        idx = balance_indices(train_set.labels, seed=int(rng.integers(2**31)), n_classes=net.spec.n_classes)
        idx = idx[rng.permutation(idx.size)]
        losses = []
        for s in range(0, idx.size, cfg.batch_size):
            b = idx[s : s + cfg.batch_size]
            tiles = train_set.images[b]
            if cfg.augment:
                tiles = random_flips(tiles, rng)
            x, aux = build_batch(mode, tiles, train_set.dfb[b], net.dfb_norm)
            loss, grads = loss_and_grads(net, x, aux, train_set.labels[b])
            adam_step(net, grads, cfg.learning_rate)
            losses.append(loss * len(b))
        score = evaluate_mrecall(net, val_set)
        improved = score > best_score
        if improved:
            best, best_score, wait = net.copy(), score, 0
        else:
            wait += 1
        row = {
            "epoch": epoch,
            "train_loss": float(np.sum(losses) / idx.size),
            "val_mrecall": score,
            "best_flag": int(improved),
        }
        history.append(row)
        log.info("epoch %d loss %.4f val mRecall %.4f%s", epoch, row["train_loss"], score, " *" if improved else "")
        if not improved and wait >= cfg.patience:
            break
    return best, history


# -- checkpoints -------------------------------------------------------------


def save_checkpoint(path, net: NetworkState) -> None:
    """Binary checkpoint: magic, version, JSON header, float64 tensors."""
    names = list(param_shapes(net.mode, net.spec))
    has_moments = bool(net.m)
    header = {
        "mode": net.mode.value,
        "spec": net.spec.to_dict(),
        "dfb_norm": net.dfb_norm,
        "t": net.t,
        "tensors": [[n, list(net.params[n].shape)] for n in names],
        "moments": has_moments,
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<II", CKPT_VERSION, len(blob)))
        fh.write(blob)
        groups = [net.params] + ([net.m, net.v] if has_moments else [])
        for group in groups:
            for n in names:
                fh.write(np.ascontiguousarray(group[n], dtype="<f8").tobytes())


def load_checkpoint(path) -> NetworkState:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:8] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack_from("<II", raw, 8)
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[16 : 16 + hlen])
    offset = 16 + hlen
    mode = FusionMode.parse(header["mode"])
    spec = ArchSpec.from_dict(header["spec"])

    def read_group():
        nonlocal offset
        out = {}
        for name, shape in header["tensors"]:
            count = int(np.prod(shape))
            out[name] = np.frombuffer(raw, dtype="<f8", count=count, offset=offset).reshape(shape).copy()
            offset += 8 * count
        return out

    params = read_group()
    expected = param_shapes(mode, spec)
    for name, shape in expected.items():
        if params.get(name) is None or params[name].shape != shape:
            raise ValueError(f"{path}: tensor {name} missing or mis-shaped")
    state = NetworkState(mode, spec, params, t=int(header["t"]), dfb_norm=float(header["dfb_norm"]))
    if header["moments"]:
        state.m = read_group()
        state.v = read_group()
    else:
        state.reset_optimizer()
    if offset != len(raw):
        raise ValueError(f"{path}: trailing bytes in checkpoint")
    return state
