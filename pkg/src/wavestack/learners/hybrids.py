"""The three hybrid base learners as scikit-learn style regressors.

All take windows ``X`` of shape (n, window_len, n_features) and targets ``y``
of shape (n, n_outputs). Learners that model time accept an optional ``t``
(strictly increasing, in samples); without it the row index is used.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from .cluster import kmeans_assign, kmeans_fit, one_hot
from .nn import TrainConfig, build_conv_seq_net, build_recurrent_net, train_network
from .trees import ForestConfig, forest_fit
from .trend import TrendSeasonConfig, fit_trend_season, predict_trend_season


def check_windows(X, n_features=None) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 3:
        raise ValueError(f"expected windows of shape (n, window_len, n_features), got {X.shape}")
    if X.shape[0] == 0 or X.shape[1] == 0:
        raise ValueError("empty window array")
    if n_features is not None and X.shape[2] != n_features:
        raise ValueError(f"expected {n_features} features per step, got {X.shape[2]}")
    if not np.all(np.isfinite(X)):
        raise ValueError("windows contain non-finite values")
    return X


def check_targets(y, n) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    if y.ndim == 1:
        y = y[:, None]
    if y.shape[0] != n:
        raise ValueError(f"X has {n} windows but y has {y.shape[0]} rows")
    if not np.all(np.isfinite(y)):
        raise ValueError("targets contain non-finite values")
    return y


def flatten_windows(X) -> np.ndarray:
    """Last step, window mean and window std of every feature."""
    X = np.asarray(X, dtype=np.float64)
    return np.hstack([X[:, -1, :], X.mean(axis=1), X.std(axis=1)])


def _time_axis(t, n):
    return np.arange(n, dtype=np.float64) if t is None else np.asarray(t, dtype=np.float64)


class _NetMixin:
    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs, batch_size=self.batch_size, patience=self.patience,
            learning_rate=self.learning_rate, sample_stride=self.sample_stride,
        )

    @property
    def _np_dtype(self):
        return np.dtype(self.dtype).type


class ProphetLSTMRegressor(_NetMixin, RegressorMixin, BaseEstimator):
    """Trend-season model per output plus an LSTM on its residuals."""

    uses_time = True

    def __init__(self, units=64, dropout=0.3, epochs=30, batch_size=64, patience=5,
                 learning_rate=1e-3, sample_stride=1, n_changepoints=5,
                 seasonalities=((1000.0, 3),), seasonality_mode="multiplicative",
                 exog="window", dtype="float32", random_state=0):
        self.units = units
        self.dropout = dropout
        self.epochs = epochs
        self.batch_size = batch_size
        self.patience = patience
        self.learning_rate = learning_rate
        self.sample_stride = sample_stride
        self.n_changepoints = n_changepoints
        self.seasonalities = seasonalities
        self.seasonality_mode = seasonality_mode
        self.exog = exog
        self.dtype = dtype
        self.random_state = random_state

    def _exog(self, X):
        if self.exog == "window":
            return X.reshape(len(X), -1)
        if self.exog == "summary":
            return flatten_windows(X)
        if self.exog in (None, "none"):
            return None
        raise ValueError(f"exog must be 'window', 'summary' or 'none', got {self.exog!r}")

    def fit(self, X, y, t=None):
        X = check_windows(X)
        y = check_targets(y, len(X))
        t = _time_axis(t, len(X))
        cfg = TrendSeasonConfig(self.n_changepoints, 0.8, self.seasonalities, self.seasonality_mode)
        exog = self._exog(X)
        seeds = np.random.SeedSequence(self.random_state).generate_state(y.shape[1])
        self.trend_models_, self.nets_, self.histories_ = [], [], []
        for d in range(y.shape[1]):
            tm = fit_trend_season(t, y[:, d], exog, cfg)
            resid = y[:, d] - predict_trend_season(tm, t, exog)
            net = build_recurrent_net(X.shape[2], 1, self.units, self.dropout, int(seeds[d]), self._np_dtype)
            self.histories_.append(train_network(net, X, resid, self._train_config(), int(seeds[d])))
            self.trend_models_.append(tm)
            self.nets_.append(net)
        self.n_features_in_ = X.shape[2]
        self.n_outputs_ = y.shape[1]
        return self

    def predict_components(self, X, t=None):
        """(trend-season part, residual-net part), each (n, n_outputs)."""
        check_is_fitted(self, "nets_")
        X = check_windows(X, self.n_features_in_)
        t = _time_axis(t, len(X))
        exog = self._exog(X)
        trend = np.column_stack([predict_trend_season(m, t, exog) for m in self.trend_models_])
        resid = np.column_stack([net.predict(X)[:, 0] for net in self.nets_]).astype(np.float64)
        return trend, resid

    def predict(self, X, t=None):
        trend, resid = self.predict_components(X, t)
        return trend + resid


class CNNLSTMRegressor(_NetMixin, RegressorMixin, BaseEstimator):
    """Conv1D feature extractor feeding an LSTM with a dense multi-output head."""

    def __init__(self, filters=64, kernel_size=5, pool_size=2, units=100, dropout=0.3,
                 epochs=30, batch_size=64, patience=5, learning_rate=1e-3,
                 sample_stride=1, dtype="float32", random_state=0):
        self.filters = filters
        self.kernel_size = kernel_size
        self.pool_size = pool_size
        self.units = units
        self.dropout = dropout
        self.epochs = epochs
        self.batch_size = batch_size
        self.patience = patience
        self.learning_rate = learning_rate
        self.sample_stride = sample_stride
        self.dtype = dtype
        self.random_state = random_state

    def fit(self, X, y):
        X = check_windows(X)
        y = check_targets(y, len(X))
        if X.shape[1] < self.kernel_size:
            raise ValueError(f"window length {X.shape[1]} is shorter than kernel_size={self.kernel_size}")
        self.net_ = build_conv_seq_net(
            X.shape[2], y.shape[1], self.filters, self.kernel_size, self.pool_size,
            self.units, self.dropout, self.random_state, self._np_dtype,
        )
        self.history_ = train_network(self.net_, X, y, self._train_config(), self.random_state)
        self.n_features_in_ = X.shape[2]
        self.n_outputs_ = y.shape[1]
        return self

    def predict(self, X):
        check_is_fitted(self, "net_")
        X = check_windows(X, self.n_features_in_)
        if X.shape[1] < self.kernel_size:
            raise ValueError(f"window length {X.shape[1]} is shorter than kernel_size={self.kernel_size}")
        return self.net_.predict(X).astype(np.float64)


class LSTMKMeansRFRegressor(_NetMixin, RegressorMixin, BaseEstimator):
    """LSTM prediction, refined by a forest on its residuals.

    The forest sees the flattened window, the LSTM prediction and a one-hot
    k-means regime label computed on those two.
    """

    def __init__(self, units=64, dropout=0.3, epochs=30, batch_size=64, patience=5,
                 learning_rate=1e-3, sample_stride=1, n_clusters=5, n_estimators=150,
                 max_depth=20, min_samples_leaf=1, max_features=1.0 / 3.0, n_jobs=1,
                 dtype="float32", random_state=0):
        self.units = units
        self.dropout = dropout
        self.epochs = epochs
        self.batch_size = batch_size
        self.patience = patience
        self.learning_rate = learning_rate
        self.sample_stride = sample_stride
        self.n_clusters = n_clusters
        self.n_estimators = n_estimators
        self.max_depth = max_depth
        self.min_samples_leaf = min_samples_leaf
        self.max_features = max_features
        self.n_jobs = n_jobs
        self.dtype = dtype
        self.random_state = random_state

    def _augment(self, X, P):
        return np.hstack([flatten_windows(X), P])

    def fit(self, X, y):
        X = check_windows(X)
        y = check_targets(y, len(X))
        s_net, s_km, s_rf = np.random.SeedSequence(self.random_state).generate_state(3)
        self.net_ = build_recurrent_net(X.shape[2], y.shape[1], self.units, self.dropout, int(s_net),
                                        self._np_dtype)
        self.history_ = train_network(self.net_, X, y, self._train_config(), int(s_net))
        P = self.net_.predict(X).astype(np.float64)
        X_aug = self._augment(X, P)
        self.kmeans_ = kmeans_fit(X_aug, self.n_clusters, int(s_km))
        labels = kmeans_assign(self.kmeans_, X_aug)
        X_res = np.hstack([X_aug, one_hot(labels, self.n_clusters)])
        cfg = ForestConfig(self.n_estimators, self.max_depth, self.min_samples_leaf,
                           self.max_features, True, self.n_jobs)
        self.forest_ = forest_fit(X_res, y - P, cfg, int(s_rf))
        self.n_features_in_ = X.shape[2]
        self.n_outputs_ = y.shape[1]
        return self

    def predict_components(self, X):
        """(primary-net part, residual-forest part), plus the cluster labels."""
        check_is_fitted(self, "forest_")
        X = check_windows(X, self.n_features_in_)
        P = self.net_.predict(X).astype(np.float64)
        X_aug = self._augment(X, P)
        labels = kmeans_assign(self.kmeans_, X_aug)
        R = self.forest_.predict(np.hstack([X_aug, one_hot(labels, self.n_clusters)]))
        return P, R, labels

    def predict(self, X):
        P, R, _ = self.predict_components(X)
        return P + R


def fit_prophet_lstm(X, y, cfg=None, seed=0, t=None) -> ProphetLSTMRegressor:
    return ProphetLSTMRegressor(**(cfg or {}), random_state=seed).fit(X, y, t=t)


def predict_prophet_lstm(model, X, t=None):
    return model.predict(X, t=t)


def fit_cnn_lstm(X, y, cfg=None, seed=0) -> CNNLSTMRegressor:
    return CNNLSTMRegressor(**(cfg or {}), random_state=seed).fit(X, y)


def predict_cnn_lstm(model, X):
    return model.predict(X)


def fit_lstm_km_rf(X, y, cfg=None, seed=0) -> LSTMKMeansRFRegressor:
    return LSTMKMeansRFRegressor(**(cfg or {}), random_state=seed).fit(X, y)


def predict_lstm_km_rf(model, X):
    return model.predict(X)


LEARNER_CLASSES = {
    "prophet_lstm": ProphetLSTMRegressor,
    "cnn_lstm": CNNLSTMRegressor,
    "lstm_km_rf": LSTMKMeansRFRegressor,
}
