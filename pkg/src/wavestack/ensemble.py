"""Out-of-fold stacking over the hybrid base learners.

Meta-feature column layout: for each base learner in declaration order, one
column per output, named ``"<learner>:<output>"``. The layout is stored with
the fitted model and checked at prediction time.
"""
from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin, clone
from sklearn.utils.validation import check_is_fitted

from .dataset import TARGETS, make_splits
from .learners.trees import GBTConfig, gbt_fit

logger = logging.getLogger(__name__)


class LayoutMismatch(ValueError):
    """Meta-feature columns differ from those the meta-learner was trained on."""


def meta_columns(learner_names: Sequence[str], outputs: Sequence[str] = TARGETS) -> List[str]:
    return [f"{name}:{out}" for name in learner_names for out in outputs]


def contiguous_folds(n: int, K: int) -> List[np.ndarray]:
    if K < 2:
        raise ValueError(f"K must be >= 2, got {K}")
    return [np.arange(r.start, r.stop) for r in make_splits(n, 1.0, K).folds]


def _fit(est, X, y, t):
    if getattr(est, "uses_time", False):
        return est.fit(X, y, t=t)
    return est.fit(X, y)


def _predict(est, X, t):
    if getattr(est, "uses_time", False):
        return est.predict(X, t=t)
    return est.predict(X)


def _with_seed(est, seed: int):
    est = clone(est)
    if "random_state" in est.get_params(deep=False):
        est.set_params(random_state=int(seed))
    return est


def _as_2d(pred, n):
    pred = np.asarray(pred, dtype=np.float64)
    return pred.reshape(n, -1)


@dataclass
class MetaFeatures:
    values: np.ndarray          # (n_train, n_learners * n_outputs)
    columns: List[str]
    fold_of: np.ndarray         # fold index that produced each row
    fit_seconds: Dict[str, float] = field(default_factory=dict)


def generate_meta_features(
    X, y, learners: Mapping[str, Any], K: int = 5, seed: int = 0, t=None,
    outputs: Sequence[str] = TARGETS, n_jobs: int = 1,
) -> Tuple[MetaFeatures, Dict[str, Any]]:
    """Out-of-fold base predictions, then every learner refit on all rows.

    ``learners`` maps names to unfitted estimator prototypes. Folds are
    contiguous blocks in row order. Returns the meta-features and the refit
    learners.
    """
    X = np.asarray(X)
    y = np.asarray(y, dtype=np.float64)
    y = y[:, None] if y.ndim == 1 else y
    n = len(X)
    if len(y) != n:
        raise ValueError(f"X has {n} rows but y has {len(y)}")
    if not learners:
        raise ValueError("no base learners given")
    t = np.arange(n, dtype=np.float64) if t is None else np.asarray(t, dtype=np.float64)
    n_out = y.shape[1]
    if len(outputs) != n_out:
        outputs = [f"y{j}" for j in range(n_out)]
    folds = contiguous_folds(n, K)
    names = list(learners)
    for name in names:
        need = int(getattr(learners[name], "min_train_size", 1))
        for k, fold in enumerate(folds):
            if len(fold) == 0 or n - len(fold) < need:
                raise ValueError(
                    f"fold {k} leaves {n - len(fold)} training rows for learner {name!r}, "
                    f"which needs at least {need}"
                )

    seeds = np.random.SeedSequence(seed).generate_state(len(names))
    values = np.full((n, len(names) * n_out), np.nan)
    writes = np.zeros(n, dtype=np.int64)
    fold_of = np.full(n, -1, dtype=np.int64)
    timings: Dict[str, float] = {name: 0.0 for name in names}

    def run_fold(j, k):
        fold = folds[k]
        mask = np.ones(n, dtype=bool)
        mask[fold] = False
        est = _with_seed(learners[names[j]], seeds[j])
        t0 = time.perf_counter()
        _fit(est, X[mask], y[mask], t[mask])
        pred = _as_2d(_predict(est, X[fold], t[fold]), len(fold))
        return j, k, pred, time.perf_counter() - t0

    tasks = [(j, k) for j in range(len(names)) for k in range(len(folds))]
    if n_jobs and n_jobs > 1:
        with ThreadPoolExecutor(n_jobs) as pool:
            results = list(pool.map(lambda jk: run_fold(*jk), tasks))
    else:
        results = [run_fold(j, k) for j, k in tasks]
    for j, k, pred, secs in results:
        fold = folds[k]
        values[fold, j * n_out:(j + 1) * n_out] = pred
        if j == 0:
            writes[fold] += 1
            fold_of[fold] = k
        timings[names[j]] += secs
        logger.info("learner %s fold %d done in %.1fs", names[j], k, secs)
    if not (np.all(writes == 1) and np.all(np.isfinite(values))):
        raise RuntimeError("out-of-fold assembly did not fill every row exactly once")

    fitted = {}
    for j, name in enumerate(names):
        est = _with_seed(learners[name], seeds[j])
        t0 = time.perf_counter()
        fitted[name] = _fit(est, X, y, t)
        timings[name] += time.perf_counter() - t0
    return MetaFeatures(values, meta_columns(names, outputs), fold_of, timings), fitted


class GBTMetaRegressor(RegressorMixin, BaseEstimator):
    """Gradient-boosted trees over named meta-feature columns."""

    def __init__(self, n_estimators=200, learning_rate=0.05, max_depth=5, subsample=0.8,
                 min_samples_leaf=1, random_state=0):
        self.n_estimators = n_estimators
        self.learning_rate = learning_rate
        self.max_depth = max_depth
        self.subsample = subsample
        self.min_samples_leaf = min_samples_leaf
        self.random_state = random_state

    def fit(self, Z, y, columns: Optional[Sequence[str]] = None):
        Z = np.asarray(Z, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        if Z.ndim != 2 or len(Z) != len(y):
            raise ValueError(f"meta-features {Z.shape} and targets {y.shape} do not align")
        cfg = GBTConfig(self.n_estimators, self.learning_rate, self.max_depth, self.subsample,
                        self.min_samples_leaf)
        self.model_ = gbt_fit(Z, y, cfg, self.random_state)
        self.columns_ = list(columns) if columns is not None else [f"f{i}" for i in range(Z.shape[1])]
        self.n_features_in_ = Z.shape[1]
        return self

    def check_columns(self, columns: Optional[Sequence[str]], n_cols: int):
        if n_cols != self.n_features_in_:
            raise LayoutMismatch(f"expected {self.n_features_in_} meta-feature columns, got {n_cols}")
        if columns is not None and list(columns) != self.columns_:
            raise LayoutMismatch(f"meta-feature columns {list(columns)} do not match trained layout {self.columns_}")

    def predict(self, Z, columns: Optional[Sequence[str]] = None):
        check_is_fitted(self, "model_")
        Z = np.asarray(Z, dtype=np.float64)
        self.check_columns(columns, Z.shape[1])
        return self.model_.predict(Z)

    @property
    def train_loss_(self):
        return self.model_.train_loss


class IdentityRegressor(RegressorMixin, BaseEstimator):
    """Returns its input unchanged. Stand-in meta-model for plumbing checks."""

    def fit(self, Z, y=None, columns=None):
        Z = np.asarray(Z, dtype=np.float64)
        self.n_features_in_ = Z.shape[1]
        self.columns_ = list(columns) if columns is not None else None
        return self

    def predict(self, Z, columns=None):
        check_is_fitted(self, "n_features_in_")
        Z = np.asarray(Z, dtype=np.float64)
        if Z.shape[1] != self.n_features_in_:
            raise LayoutMismatch(f"expected {self.n_features_in_} columns, got {Z.shape[1]}")
        if columns is not None and self.columns_ is not None and list(columns) != self.columns_:
            raise LayoutMismatch("meta-feature columns do not match trained layout")
        return Z.copy()


def train_meta(meta_features, y_train, cfg: Optional[dict] = None, seed: int = 0,
               columns: Optional[Sequence[str]] = None) -> GBTMetaRegressor:
    if isinstance(meta_features, MetaFeatures):
        columns = meta_features.columns
        meta_features = meta_features.values
    if len(meta_features) != len(y_train):
        raise ValueError(f"{len(meta_features)} meta-feature rows vs {len(y_train)} targets")
    return GBTMetaRegressor(**(cfg or {}), random_state=seed).fit(meta_features, y_train, columns)


class StackingEnsemble(RegressorMixin, BaseEstimator):
    """Two-level stack: out-of-fold base predictions feed a meta-learner.

    Parameters
    ----------
    learners : list of (name, estimator)
        Unfitted base learners; order fixes the meta-feature layout.
    meta : estimator, optional
        Meta-learner accepting ``fit(Z, y, columns)``; boosted trees by default.
    K : int
        Number of contiguous out-of-fold blocks.
    """

    def __init__(self, learners=(), meta=None, K=5, n_jobs=1, random_state=0):
        self.learners = learners
        self.meta = meta
        self.K = K
        self.n_jobs = n_jobs
        self.random_state = random_state

    uses_time = True

    def fit(self, X, y, t=None):
        names = [name for name, _ in self.learners]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate learner names: {names}")
        y = np.asarray(y, dtype=np.float64)
        y = y[:, None] if y.ndim == 1 else y
        s_base, s_meta = np.random.SeedSequence(self.random_state).generate_state(2)
        outputs = TARGETS if y.shape[1] == len(TARGETS) else [f"y{j}" for j in range(y.shape[1])]
        self.meta_features_, self.base_learners_ = generate_meta_features(
            X, y, dict(self.learners), self.K, int(s_base), t, outputs, self.n_jobs)
        meta = GBTMetaRegressor() if self.meta is None else self.meta
        meta = clone(meta)
        if "random_state" in meta.get_params(deep=False):
            meta.set_params(random_state=int(s_meta))
        t0 = time.perf_counter()
        self.meta_ = meta.fit(self.meta_features_.values, y, columns=self.meta_features_.columns)
        self.fit_seconds_ = dict(self.meta_features_.fit_seconds, meta=time.perf_counter() - t0)
        self.columns_ = list(self.meta_features_.columns)
        self.outputs_ = list(outputs)
        return self

    @property
    def learner_names_(self) -> List[str]:
        return list(self.base_learners_)

    def base_predictions(self, X, t=None) -> Dict[str, np.ndarray]:
        check_is_fitted(self, "meta_")
        n = len(X)
        t = np.arange(n, dtype=np.float64) if t is None else np.asarray(t, dtype=np.float64)
        return {name: _as_2d(_predict(est, X, t), n) for name, est in self.base_learners_.items()}

    def meta_features(self, X, t=None) -> Tuple[np.ndarray, List[str]]:
        preds = self.base_predictions(X, t)
        return np.hstack([preds[name] for name in self.base_learners_]), meta_columns(
            list(self.base_learners_), self.outputs_)

    def predict_from_meta(self, Z, columns=None):
        check_is_fitted(self, "meta_")
        if columns is not None and list(columns) != self.columns_:
            raise LayoutMismatch(f"meta-feature columns {list(columns)} do not match trained layout {self.columns_}")
        return np.asarray(self.meta_.predict(Z, columns=columns), dtype=np.float64)

    def predict(self, X, t=None):
        Z, cols = self.meta_features(X, t)
        return self.predict_from_meta(Z, cols)


def stacked_predict(model: StackingEnsemble, X, t=None):
    return model.predict(X, t=t)


# --------------------------------------------------------------------------- stubs


class MeanRegressor(RegressorMixin, BaseEstimator):
    """Predicts the training mean of every output."""

    def fit(self, X, y):
        self.mean_ = np.atleast_1d(np.asarray(y, dtype=np.float64).mean(axis=0))
        return self

    def predict(self, X):
        check_is_fitted(self, "mean_")
        return np.tile(self.mean_, (len(X), 1))


class OracleRegressor(RegressorMixin, BaseEstimator):
    """Looks up a fixed target table by row key; used to build consistency fixtures."""

    def __init__(self, lookup=None):
        self.lookup = lookup

    def fit(self, X, y):
        self.fitted_ = True
        return self

    def predict(self, X):
        check_is_fitted(self, "fitted_")
        return np.array([self.lookup[_row_key(x)] for x in np.asarray(X)])


def _row_key(x) -> bytes:
    return np.ascontiguousarray(np.asarray(x, dtype=np.float64)).tobytes()


class MemorizingRegressor(RegressorMixin, BaseEstimator):
    """Returns stored training targets for rows seen in fit; a large sentinel otherwise."""

    def __init__(self, unseen_value=1e9):
        self.unseen_value = unseen_value

    def fit(self, X, y):
        y = np.asarray(y, dtype=np.float64)
        y = y[:, None] if y.ndim == 1 else y
        self.table_ = {_row_key(x): y[i] for i, x in enumerate(np.asarray(X))}
        self.n_outputs_ = y.shape[1]
        return self

    def predict(self, X):
        check_is_fitted(self, "table_")
        blank = np.full(self.n_outputs_, self.unseen_value)
        return np.array([self.table_.get(_row_key(x), blank) for x in np.asarray(X)])


# --------------------------------------------------------------------------- tuning


@dataclass
class TuneResult:
    trials: List[Dict[str, Any]]
    val_rmse: List[float]
    best_params: Dict[str, Any]
    best_rmse: float

    @property
    def best_index(self) -> int:
        return int(np.argmin(self.val_rmse))


def _sample(spec, rng):
    if isinstance(spec, tuple) and len(spec) == 2 and all(isinstance(v, (int, float)) for v in spec):
        lo, hi = spec
        if isinstance(lo, int) and isinstance(hi, int):
            return int(rng.integers(lo, hi + 1))
        return float(rng.uniform(lo, hi))
    if isinstance(spec, list):
        if not spec:
            raise ValueError("empty choice list in search space")
        return spec[int(rng.integers(len(spec)))]
    return spec


def sample_params(search_space: Mapping[str, Any], rng) -> Dict[str, Any]:
    """Tuples ``(lo, hi)`` are uniform ranges (integers if both ends are ints);
    lists are uniform choices; anything else is held fixed."""
    return {name: _sample(spec, rng) for name, spec in sorted(search_space.items())}


def tune_random(search_space: Mapping[str, Any], budget: int, seed: int, train_data,
                make_estimator: Callable[[Dict[str, Any]], Any], val_fraction: float = 0.10) -> TuneResult:
    """Uniform random search scored by RMSE on the chronologically last rows.

    ``train_data`` is ``(X, y)`` or ``(X, y, t)``.
    """
    if not search_space:
        raise ValueError("empty search space")
    if budget < 1:
        raise ValueError("budget must be >= 1")
    X, y, *rest = train_data
    y = np.asarray(y, dtype=np.float64)
    n = len(X)
    t = np.asarray(rest[0], dtype=np.float64) if rest else np.arange(n, dtype=np.float64)
    n_val = max(1, int(round(val_fraction * n)))
    tr, va = slice(0, n - n_val), slice(n - n_val, n)
    rng = np.random.default_rng(seed)
    trials, scores = [], []
    for _ in range(budget):
        params = sample_params(search_space, rng)
        est = make_estimator(params)
        _fit(est, X[tr], y[tr], t[tr])
        pred = _as_2d(_predict(est, X[va], t[va]), n_val).reshape(y[va].shape)
        rmse = float(math.sqrt(np.mean((pred - y[va]) ** 2)))
        trials.append(params)
        scores.append(rmse)
    best = int(np.argmin(scores))
    return TuneResult(trials, scores, trials[best], scores[best])
