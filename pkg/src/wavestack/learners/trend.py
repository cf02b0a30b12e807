"""Least-squares trend + seasonality + exogenous-regressor model.

Trend is piecewise linear with hinge terms at fixed changepoints. Seasonality
is a Fourier basis. In multiplicative mode every Fourier column is also
multiplied by every trend column, so ``trend * (1 + seasonal)`` lies inside the
fitted linear span.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple

import numpy as np


class RankDeficientWarning(UserWarning):
    pass


RIDGE_FALLBACK = 1e-8


@dataclass
class TrendSeasonConfig:
    n_changepoints: int = 5
    changepoint_range: float = 0.8
    seasonalities: Sequence[Tuple[float, int]] = ((10.0, 3),)
    mode: str = "multiplicative"

    def __post_init__(self):
        if self.mode not in ("multiplicative", "additive"):
            raise ValueError(f"mode must be 'multiplicative' or 'additive', got {self.mode!r}")
        if self.n_changepoints < 0:
            raise ValueError("n_changepoints must be >= 0")
        self.seasonalities = tuple((float(p), int(o)) for p, o in self.seasonalities)


@dataclass
class TrendSeasonModel:
    config: TrendSeasonConfig
    changepoints: np.ndarray
    coef_trend: np.ndarray
    coef_season: np.ndarray
    coef_exog: np.ndarray
    col_scale: np.ndarray = field(repr=False, default=None)
    ridge_used: bool = False

    def n_trend(self):
        return len(self.coef_trend)


def _trend_basis(t, changepoints):
    cols = [np.ones_like(t), t] + [np.maximum(t - c, 0.0) for c in changepoints]
    return np.column_stack(cols)


def _fourier_basis(t, seasonalities):
    cols = []
    for period, order in seasonalities:
        for k in range(1, order + 1):
            arg = 2.0 * np.pi * k * t / period
            cols += [np.sin(arg), np.cos(arg)]
    return np.column_stack(cols) if cols else np.zeros((len(t), 0))


def _season_block(trend, fourier, mode):
    if fourier.shape[1] == 0:
        return fourier
    if mode == "additive":
        return fourier
    # (n, n_trend, n_fourier) -> (n, n_trend * n_fourier)
    return (trend[:, :, None] * fourier[:, None, :]).reshape(len(trend), -1)


def _exog_matrix(X_exog, n):
    if X_exog is None:
        return np.zeros((n, 0))
    X = np.asarray(X_exog, dtype=np.float64)
    return X.reshape(n, -1)


def design_matrix(model_or_cfg, t, X_exog=None, changepoints=None):
    cfg = model_or_cfg.config if isinstance(model_or_cfg, TrendSeasonModel) else model_or_cfg
    if changepoints is None:
        changepoints = model_or_cfg.changepoints
    t = np.asarray(t, dtype=np.float64)
    trend = _trend_basis(t, changepoints)
    season = _season_block(trend, _fourier_basis(t, cfg.seasonalities), cfg.mode)
    return np.hstack([trend, season, _exog_matrix(X_exog, len(t))]), trend.shape[1], season.shape[1]


def fit_trend_season(t, y, X_exog=None, cfg: Optional[TrendSeasonConfig] = None) -> TrendSeasonModel:
    cfg = cfg or TrendSeasonConfig()
    t = np.asarray(t, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if t.ndim != 1 or len(t) != len(y):
        raise ValueError("t and y must be 1-D and of equal length")
    if len(t) > 1 and not np.all(np.diff(t) > 0):
        raise ValueError("t must be strictly increasing")
    if cfg.n_changepoints and len(t) > 1:
        hi = t[0] + cfg.changepoint_range * (t[-1] - t[0])
        changepoints = np.linspace(t[0], hi, cfg.n_changepoints + 2)[1:-1]
    else:
        changepoints = np.zeros(0)
    A, n_tr, n_se = design_matrix(cfg, t, X_exog, changepoints)
    scale = np.sqrt(np.sum(A * A, axis=0))
    scale[scale == 0] = 1.0
    As = A / scale
    coef, _, rank, _ = np.linalg.lstsq(As, y, rcond=None)
    ridge = rank < As.shape[1]
    if ridge:
        warnings.warn(
            f"design matrix is rank deficient ({rank} < {As.shape[1]}); using ridge lambda={RIDGE_FALLBACK}",
            RankDeficientWarning, stacklevel=2,
        )
        G = As.T @ As + RIDGE_FALLBACK * np.eye(As.shape[1])
        coef = np.linalg.solve(G, As.T @ y)
    coef = coef / scale
    return TrendSeasonModel(
        config=cfg,
        changepoints=changepoints,
        coef_trend=coef[:n_tr],
        coef_season=coef[n_tr:n_tr + n_se],
        coef_exog=coef[n_tr + n_se:],
        col_scale=scale,
        ridge_used=bool(ridge),
    )


def _coef(model):
    return np.concatenate([model.coef_trend, model.coef_season, model.coef_exog])


def predict_trend_season(model: TrendSeasonModel, t, X_exog=None) -> np.ndarray:
    A, _, _ = design_matrix(model, t, X_exog if len(model.coef_exog) else None)
    return A @ _coef(model)


def trend_component(model: TrendSeasonModel, t) -> np.ndarray:
    return _trend_basis(np.asarray(t, dtype=np.float64), model.changepoints) @ model.coef_trend
