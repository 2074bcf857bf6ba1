"""scikit-learn compatible wrappers around the BFP quantizer and trainer."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.multiclass import unique_labels
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .bfp import ZseStats, fake_quantize
from .datasets import Dataset
from .layers import LayerKind, PrecisionConfig
from .trainer import ControllerConfig, TrainConfig, default_network, evaluate, predict_logits, train

__all__ = ["BfpQuantizer", "BfpNetClassifier"]


class BfpQuantizer(TransformerMixin, BaseEstimator):
    """Fake-quantize arrays to a BFP format.

    ``transform`` returns the dequantized BFP values; ``zse_`` holds the
    zero-setting-error counts of the most recent call.  2-D input is treated
    as ``(samples, channels)``.

    Parameters
    ----------
    layer_type : str
        Block rule to apply (``"conv3"``, ``"conv1x1_or_fc"``, ...).
    bfp_format : str
        ``"FB12"``, ``"FB16"`` or ``"FB24"``.
    layout : {"activation", "weight"}
    """

    def __init__(self, layer_type="conv1x1_or_fc", bfp_format="FB16", layout="activation"):
        self.layer_type = layer_type
        self.bfp_format = bfp_format
        self.layout = layout

    def fit(self, X, y=None):
        LayerKind.coerce(self.layer_type)
        X = check_array(X, allow_nd=True, ensure_all_finite=True)
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        self.zse_ = ZseStats()
        return self

    def transform(self, X):
        check_is_fitted(self, "n_features_in_")
        X = check_array(X, allow_nd=True, ensure_all_finite=True)
        if int(np.prod(X.shape[1:])) != self.n_features_in_:
            raise ValueError(f"X has {int(np.prod(X.shape[1:]))} features, expected {self.n_features_in_}")
        out, self.zse_ = fake_quantize(X, self.layer_type, self.bfp_format, self.layout)
        return out


class BfpNetClassifier(ClassifierMixin, BaseEstimator):
    """Small CNN trained with pseudo-BFP arithmetic.

    Inputs are images of shape ``(n, 1, 16, 16)`` (or flat 256-feature rows);
    the network is :func:`flexblock.trainer.default_network`.  After ``fit``,
    ``history_`` holds one :class:`~flexblock.trainer.EpochMetrics` per epoch.
    """

    def __init__(self, x_width=16, w_width=16, g_width=16, wg_width=16, quantize=True,
                 dynamic=False, t_hi=0.05, t_lo=0.01, eta=0.1, epochs=12, batch_size=32,
                 lr_milestones=(8,), seed=0, width=8):
        self.x_width = x_width
        self.w_width = w_width
        self.g_width = g_width
        self.wg_width = wg_width
        self.quantize = quantize
        self.dynamic = dynamic
        self.t_hi = t_hi
        self.t_lo = t_lo
        self.eta = eta
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr_milestones = lr_milestones
        self.seed = seed
        self.width = width

    def _images(self, X):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 2:
            if X.shape[1] != 256:
                raise ValueError(f"flat input needs 256 features, got {X.shape[1]}")
            X = X.reshape(-1, 1, 16, 16)
        if X.shape[1:] != (1, 16, 16):
            raise ValueError(f"expected images of shape (n, 1, 16, 16), got {X.shape}")
        return X

    def _precision(self):
        return PrecisionConfig(self.x_width, self.w_width, self.g_width, self.wg_width)

    def fit(self, X, y, X_val=None, y_val=None):
        X, y = check_X_y(X, y, allow_nd=True)
        X = self._images(X)
        self.classes_ = unique_labels(y)
        self.n_features_in_ = 256
        y_idx = np.searchsorted(self.classes_, y)
        if X_val is None:
            X_val, yv = X, y_idx
        else:
            X_val, yv = self._images(X_val), np.searchsorted(self.classes_, y_val)
        data = Dataset(X, y_idx, X_val, yv, len(self.classes_))
        config = TrainConfig(
            eta=self.eta, epochs=self.epochs, batch_size=self.batch_size, seed=self.seed,
            precision=self._precision(), quantize=self.quantize,
            controller=ControllerConfig(enabled=self.dynamic, t_hi=self.t_hi, t_lo=self.t_lo,
                                        roles=("wg",), max_width=8),
            lr_milestones=tuple(self.lr_milestones),
        )
        self.network_ = default_network(len(self.classes_), self.width)
        self.history_, self.model_ = train(self.network_, data, config)
        self.precision_ = [p for p in _final_precision(self.history_, len(self.network_.layers))]
        return self

    def decision_function(self, X):
        check_is_fitted(self, "model_")
        X = self._images(check_array(X, allow_nd=True))
        return predict_logits(self.model_, X, self.precision_, self.quantize)

    def predict_proba(self, X):
        z = self.decision_function(X)
        z = z - z.max(axis=1, keepdims=True)
        p = np.exp(z)
        return p / p.sum(axis=1, keepdims=True)

    def predict(self, X):
        z = self.decision_function(X)
        return self.classes_[np.argmax(z, axis=1)]

    def bfp_accuracy(self, X, y):
        """Top-1 accuracy computed by the trainer's evaluation path."""
        check_is_fitted(self, "model_")
        y_idx = np.searchsorted(self.classes_, np.asarray(y))
        return evaluate(self.model_, self._images(X), y_idx, self.precision_, self.quantize)


def _final_precision(history, n_layers):
    widths = history[-1].widths
    return [PrecisionConfig(*(widths[(i, r)] for r in ("x", "w", "g", "wg"))) for i in range(n_layers)]
