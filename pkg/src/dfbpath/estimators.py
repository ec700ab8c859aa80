"""scikit-learn compatible wrappers.

``TissueMasker`` and ``DfBTransformer`` are stateless transformers over
lists of images; ``DfBPatchClassifier`` is a classifier over uint8 tiles of
shape ``(n, size, size, 3)`` that takes the per-patch mean DfB as a fit /
predict parameter.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from . import model as M
from .distance import distance_transform
from .imgproc import DEFAULT_MAX_HOLE_AREA, DEFAULT_MIN_AREA, HsvThresholds, tissue_mask
from .tiling import N_CLASSES


def _as_list(X):
    if isinstance(X, np.ndarray) and X.ndim in (2, 3) and X.dtype != object:
        return [X], True
    return list(X), False


class TissueMasker(TransformerMixin, BaseEstimator):
    """RGB slide raster(s) -> low-resolution boolean tissue mask(s).

    Parameters
    ----------
    factor : int
        Linear downscale factor applied before thresholding.
    sat_min, val_max : float
        HSV thresholds; a pixel is tissue when ``S >= sat_min`` and
        ``V <= val_max``.
    hue_range : tuple or None
        Optional hue interval in degrees.
    min_area, max_hole_area : int
        Fragment removal and hole filling sizes, in low-res pixels.
    """

    def __init__(
        self,
        factor=16,
        sat_min=0.07,
        val_max=0.95,
        hue_range=None,
        min_area=DEFAULT_MIN_AREA,
        max_hole_area=DEFAULT_MAX_HOLE_AREA,
    ):
        self.factor = factor
        self.sat_min = sat_min
        self.val_max = val_max
        self.hue_range = hue_range
        self.min_area = min_area
        self.max_hole_area = max_hole_area

    def fit(self, X, y=None):
        self.thresholds_ = HsvThresholds(self.sat_min, self.val_max, self.hue_range)
        return self

    def transform(self, X):
        check_is_fitted(self, "thresholds_")
        images, single = _as_list(X)
        masks = [
            tissue_mask(img, self.factor, self.thresholds_, self.min_area, self.max_hole_area)
            for img in images
        ]
        return masks[0] if single else masks


class DfBTransformer(TransformerMixin, BaseEstimator):
    """Tissue mask(s) -> distance-from-boundary image(s)."""

    def __init__(self, method="chamfer", border_is_tissue=False):
        self.method = method
        self.border_is_tissue = border_is_tissue

    def fit(self, X, y=None):
        if self.method not in ("chamfer", "exact"):
            raise ValueError(f"method must be 'chamfer' or 'exact', got {self.method!r}")
        self.fitted_ = True
        return self

    def transform(self, X):
        check_is_fitted(self, "fitted_")
        masks, single = _as_list(X)
        out = [distance_transform(m, self.method, self.border_is_tissue) for m in masks]
        return out[0] if single else out


class DfBPatchClassifier(ClassifierMixin, BaseEstimator):
    """Patch classifier with an optional distance-from-boundary input.

    Parameters
    ----------
    mode : {"baseline", "dfb_cnn", "dfb_fc"}
        How the mean DfB enters the network.
    conv_channels, fc_widths : tuple of int
        Backbone and head widths.
    learning_rate, batch_size, max_epochs, patience : see ``TrainConfig``.
    dfb_norm : float or None
        Divisor for DfB values; defaults to the largest training value.
    init_from : DfBPatchClassifier, NetworkState or None
        A fitted baseline to transfer from (zero-initialised DfB weights).
    validation_fraction : float
        Share of the training data held out for early stopping when no
        ``validation_data`` is passed to :meth:`fit`.
    random_state : int
    """

    def __init__(
        self,
        mode="baseline",
        conv_channels=(16, 32, 64),
        fc_widths=(32,),
        learning_rate=1e-3,
        batch_size=8,
        max_epochs=30,
        patience=5,
        dfb_norm=None,
        init_from=None,
        validation_fraction=0.2,
        augment=True,
        random_state=0,
    ):
        self.mode = mode
        self.conv_channels = conv_channels
        self.fc_widths = fc_widths
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.patience = patience
        self.dfb_norm = dfb_norm
        self.init_from = init_from
        self.validation_fraction = validation_fraction
        self.augment = augment
        self.random_state = random_state

    def _check_X(self, X):
        X = check_array(X, allow_nd=True, dtype=None, ensure_all_finite=True)
        if X.ndim != 4 or X.shape[-1] != 3:
            raise ValueError(f"expected tiles of shape (n, h, w, 3), got {X.shape}")
        return X

    def _check_dfb(self, dfb, n):
        mode = M.FusionMode.parse(self.mode)
        if mode is M.FusionMode.BASELINE:
            return np.zeros(n) if dfb is None else np.asarray(dfb, dtype=np.float64).reshape(-1)
        if dfb is None:
            raise ValueError(f"mode {mode.value!r} needs dfb_mean")
        dfb = check_array(np.asarray(dfb, dtype=np.float64).reshape(-1, 1)).ravel()
        if dfb.size != n or np.any(dfb < 0):
            raise ValueError("dfb_mean must be non-negative with one value per tile")
        return dfb

    def fit(self, X, y, dfb_mean=None, validation_data=None):
        """Train with early stopping on validation mRecall.

        ``validation_data`` is ``(X_val, y_val)`` or ``(X_val, y_val,
        dfb_val)``; without it a seeded ``validation_fraction`` split of the
        training data is used.
        """
        X = self._check_X(X)
        y = np.asarray(y)
        if y.shape[0] != X.shape[0]:
            raise ValueError("X and y have different lengths")
        self.classes_ = np.arange(N_CLASSES)
        if np.any((y < 0) | (y >= N_CLASSES)):
            raise ValueError(f"labels must be class indices in 0..{N_CLASSES - 1}")
        dfb = self._check_dfb(dfb_mean, len(X))
        if validation_data is None:
            rng = np.random.default_rng(self.random_state)
            order = rng.permutation(len(X))
            n_val = max(1, int(round(self.validation_fraction * len(X))))
            val, tr = order[:n_val], order[n_val:]
            train_set = M.PatchSet(X[tr], dfb[tr], y[tr])
            val_set = M.PatchSet(X[val], dfb[val], y[val])
        else:
            Xv, yv, *rest = validation_data
            Xv = self._check_X(Xv)
            dv = self._check_dfb(rest[0] if rest else None, len(Xv))
            train_set = M.PatchSet(X, dfb, y)
            val_set = M.PatchSet(Xv, dv, np.asarray(yv))

        init = None
        if self.init_from is not None:
            base = self.init_from
            if isinstance(base, DfBPatchClassifier):
                check_is_fitted(base, "network_")
                base = base.network_
            init = M.transfer_init(self.mode, base)
        cfg = M.TrainConfig(
            learning_rate=self.learning_rate,
            patience=self.patience,
            max_epochs=self.max_epochs,
            batch_size=self.batch_size,
            seed=self.random_state,
            dfb_norm=self.dfb_norm,
            augment=self.augment,
        )
        spec = M.ArchSpec(tuple(self.conv_channels), tuple(self.fc_widths))
        self.network_, self.history_ = M.train(self.mode, train_set, val_set, cfg, spec, init=init)
        return self

    def predict_proba(self, X, dfb_mean=None):
        check_is_fitted(self, "network_")
        X = self._check_X(X)
        dfb = self._check_dfb(dfb_mean, len(X))
        return M.predict_proba(self.network_, X, dfb)

    def predict(self, X, dfb_mean=None):
        proba = self.predict_proba(X, dfb_mean)
        return self.classes_[proba.argmax(axis=1)]

    def score(self, X, y, sample_weight=None, dfb_mean=None):
        """Mean accuracy; pass ``dfb_mean`` for the DfB modes."""
        pred = self.predict(X, dfb_mean)
        return float(np.average(pred == np.asarray(y), weights=sample_weight))
