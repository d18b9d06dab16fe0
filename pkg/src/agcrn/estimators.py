"""scikit-learn style wrappers around the forecasting pipeline."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from .data import Dataset, Normalizer, WindowSet
from .model import ModelConfig, build
from .training import TrainConfig, predict_windows, train


def check_windows(X, y=None, lookback: int | None = None, n_nodes: int | None = None):
    """Validate window stacks.

    ``X`` is W x T x N or W x T x N x C; a 3-D ``X`` gets a trailing feature
    axis.  ``y`` (optional) is W x tau x N.  Both must be finite.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 3:
        X = X[..., None]
    if X.ndim != 4:
        raise ValueError(f"X must be W x T x N (x C), got shape {X.shape}")
    if not np.isfinite(X).all():
        raise ValueError("X contains NaN or Inf")
    if lookback is not None and X.shape[1] != lookback:
        raise ValueError(f"X has lookback {X.shape[1]}, expected {lookback}")
    if n_nodes is not None and X.shape[2] != n_nodes:
        raise ValueError(f"X has {X.shape[2]} nodes, expected {n_nodes}")
    if y is None:
        return X
    y = np.asarray(y, dtype=np.float64)
    if y.ndim != 3 or y.shape[0] != X.shape[0] or y.shape[2] != X.shape[2]:
        raise ValueError(f"y must be W x tau x N matching X {X.shape}, got {y.shape}")
    if not np.isfinite(y).all():
        raise ValueError("y contains NaN or Inf")
    return X, y


def _window_set(X, y) -> WindowSet:
    return WindowSet(X, y, np.ones(y.shape, dtype=bool), np.arange(len(X)), (0, len(X)))


class AGCRNForecaster(BaseEstimator, RegressorMixin):
    """Fit on raw-unit windows, predict raw-unit ``W x tau x N`` forecasts.

    Inputs are normalized internally with statistics from the training
    windows.  Without ``eval_set`` the last ``validation_fraction`` of the
    windows (in order) is held out for early stopping.
    """

    def __init__(self, variant="agcrn", hidden=64, layers=2, embed_dim=10, dagg_variant="dagg_1",
                 lr=0.003, batch_size=64, max_epochs=100, patience=15, seed=0, graph=None,
                 validation_fraction=0.2):
        self.variant = variant
        self.hidden = hidden
        self.layers = layers
        self.embed_dim = embed_dim
        self.dagg_variant = dagg_variant
        self.lr = lr
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.patience = patience
        self.seed = seed
        self.graph = graph
        self.validation_fraction = validation_fraction

    def fit(self, X, y, eval_set=None):
        X, y = check_windows(X, y)
        if eval_set is None:
            n_val = max(1, int(round(len(X) * self.validation_fraction)))
            if n_val >= len(X):
                raise ValueError("not enough windows to hold out a validation set")
            X, y, Xv, yv = X[:-n_val], y[:-n_val], X[-n_val:], y[-n_val:]
        else:
            Xv, yv = check_windows(*eval_set, lookback=X.shape[1], n_nodes=X.shape[2])
        self.normalizer_ = Normalizer().fit(X)
        scale = self.normalizer_.transform
        config = ModelConfig(
            n_nodes=X.shape[2], input_dim=X.shape[3], hidden=self.hidden, layers=self.layers,
            embed_dim=self.embed_dim, horizon=y.shape[1], lookback=X.shape[1],
            variant=self.variant, dagg_variant=self.dagg_variant, seed=self.seed)
        ds = Dataset(_window_set(scale(X), y), _window_set(scale(Xv), yv), _window_set(scale(Xv), yv),
                     self.normalizer_, X.shape[1], y.shape[1])
        self.model_, self.history_ = train(
            build(config, graph=self.graph), ds,
            TrainConfig(lr=self.lr, batch_size=self.batch_size, max_epochs=self.max_epochs,
                        patience=self.patience, seed=self.seed))
        self.n_features_in_ = X.shape[3]
        return self

    def predict(self, X):
        check_is_fitted(self, "model_")
        c = self.model_.config
        X = check_windows(X, lookback=c.lookback, n_nodes=c.n_nodes)
        return predict_windows(self.model_, self.normalizer_.transform(X), self.normalizer_, self.batch_size)

    def score(self, X, y, sample_weight=None):
        """Negative MAE, so larger is better."""
        X, y = check_windows(X, y)
        return -float(np.mean(np.abs(self.predict(X) - y)))
