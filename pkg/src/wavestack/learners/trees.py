"""CART regression trees, bagged forests and gradient boosting, numpy only.

Trees are grown breadth-first: at each depth every open node is split in one
vectorized pass per feature (stable sort by node, cumulative sums, best
midpoint threshold). Splits are exact; ``x <= threshold`` goes left.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np


@dataclass
class Tree:
    feature: np.ndarray     # int, -1 for leaves
    threshold: np.ndarray
    left: np.ndarray        # int, -1 for leaves
    right: np.ndarray
    value: np.ndarray       # (n_nodes, n_outputs)
    depth: int

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    @property
    def n_leaves(self) -> int:
        return int(np.sum(self.left < 0))

    def apply(self, X) -> np.ndarray:
        """Leaf index reached by each row."""
        X = np.asarray(X, dtype=np.float64)
        node = np.zeros(len(X), dtype=np.int64)
        rows = np.arange(len(X))
        for _ in range(self.depth):
            f = self.feature[node]
            internal = f >= 0
            if not internal.any():
                break
            go_left = X[rows, np.where(internal, f, 0)] <= self.threshold[node]
            node = np.where(internal, np.where(go_left, self.left[node], self.right[node]), node)
        return node

    def predict(self, X) -> np.ndarray:
        return self.value[self.apply(X)]

    def to_arrays(self, prefix: str) -> dict:
        return {
            f"{prefix}feature": self.feature, f"{prefix}threshold": self.threshold,
            f"{prefix}left": self.left, f"{prefix}right": self.right,
            f"{prefix}value": self.value, f"{prefix}depth": np.array(self.depth),
        }

    @classmethod
    def from_arrays(cls, arrays: dict, prefix: str) -> "Tree":
        return cls(*(arrays[f"{prefix}{k}"] for k in ("feature", "threshold", "left", "right", "value")),
                   depth=int(arrays[f"{prefix}depth"]))


def _n_features_per_split(max_features, n_features: int) -> int:
    if max_features is None:
        return n_features
    if isinstance(max_features, float) and max_features <= 1.0:
        return max(1, int(math.ceil(max_features * n_features)))
    return max(1, min(int(max_features), n_features))


def build_tree(X, y, max_depth: Optional[int] = None, min_samples_leaf: int = 1,
               max_features=None, rng: Optional[np.random.Generator] = None) -> Tree:
    """Grow one CART regression tree by greedy variance reduction.

    ``y`` may be 1-D or (n, n_outputs); multi-output splits minimize the summed SSE.
    ``max_features`` (int, fraction or None) features are drawn per node.
    """
    X = np.ascontiguousarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    Y = y[:, None] if y.ndim == 1 else y
    n, F = X.shape
    if n == 0:
        raise ValueError("cannot fit a tree on empty data")
    if len(Y) != n:
        raise ValueError(f"X has {n} rows but y has {len(Y)}")
    rng = rng if rng is not None else np.random.default_rng(0)
    m_try = _n_features_per_split(max_features, F)
    depth_cap = max_depth if max_depth is not None else n
    min_leaf = max(1, int(min_samples_leaf))

    center = Y.mean(axis=0)
    Yc = Y - center
    presort = [np.argsort(X[:, f], kind="stable") for f in range(F)]

    feature = [-1]
    threshold = [0.0]
    left = [-1]
    right = [-1]
    value = [Y.mean(axis=0)]
    node_of = np.zeros(n, dtype=np.int64)
    frontier = np.array([0])
    depth = 0

    while depth < depth_cap and len(frontier):
        counts_all = np.bincount(node_of, minlength=len(feature))
        frontier = frontier[counts_all[frontier] >= 2 * min_leaf]
        if not len(frontier):
            break
        local = np.full(len(feature), -1, dtype=np.int64)
        local[frontier] = np.arange(len(frontier))
        A = len(frontier)
        in_play = local[node_of] >= 0

        if m_try < F:
            allowed = np.zeros((A, F), dtype=bool)
            picks = np.argsort(rng.random((A, F)), axis=1)[:, :m_try]
            np.put_along_axis(allowed, picks, True, axis=1)
        else:
            allowed = np.ones((A, F), dtype=bool)

        best_gain = np.zeros(A)
        best_feat = np.full(A, -1, dtype=np.int64)
        best_thr = np.zeros(A)
        node_S = node_sq = node_n = None

        for f in range(F):
            o = presort[f]
            o = o[in_play[o]]
            loc = local[node_of[o]]
            perm = np.argsort(loc, kind="stable")
            o, loc = o[perm], loc[perm]
            xs = X[o, f]
            Ys = Yc[o]
            cnt = np.bincount(loc, minlength=A)
            starts = np.concatenate(([0], np.cumsum(cnt)[:-1]))
            cs = np.cumsum(Ys, axis=0)
            before = np.zeros((A, Ys.shape[1]))
            before[1:] = cs[starts[1:] - 1]
            if node_S is None:
                node_n = cnt.astype(np.float64)
                node_S = cs[starts + cnt - 1] - before
                node_sq = np.add.reduceat(Ys * Ys, starts, axis=0).sum(axis=1)
                parent = (node_S ** 2).sum(axis=1) / node_n
            pos = np.arange(len(o))
            nL = (pos - starts[loc] + 1).astype(np.float64)
            nR = node_n[loc] - nL
            SL = cs - before[loc]
            SR = node_S[loc] - SL
            valid = (nL >= min_leaf) & (nR >= min_leaf) & allowed[loc, f]
            nxt = np.empty_like(xs)
            nxt[:-1] = xs[1:]
            nxt[-1] = xs[-1]
            valid &= nxt > xs
            with np.errstate(divide="ignore", invalid="ignore"):
                gain = (SL ** 2).sum(axis=1) / nL + (SR ** 2).sum(axis=1) / nR - parent[loc]
            gain = np.where(valid, gain, -np.inf)
            node_max = np.maximum.reduceat(gain, starts)
            better = node_max > best_gain
            if not better.any():
                continue
            hit = np.flatnonzero(gain == node_max[loc])
            hit_nodes, first = np.unique(loc[hit], return_index=True)
            p = np.empty(A, dtype=np.int64)
            p[hit_nodes] = hit[first]
            upd = np.flatnonzero(better)
            pu = p[upd]
            lo, hi = xs[pu], nxt[pu]
            mid = lo + (hi - lo) / 2.0
            mid = np.where((mid >= hi) | (mid < lo), lo, mid)
            best_gain[upd] = node_max[upd]
            best_feat[upd] = f
            best_thr[upd] = mid

        if node_sq is None:
            break
        # ignore gains that are only rounding noise
        split = (best_feat >= 0) & (best_gain > 1e-12 * np.maximum(node_sq, 1e-300))
        if not split.any():
            break
        next_frontier = []
        new_feat = np.full(A, -1, dtype=np.int64)
        new_thr = np.zeros(A)
        child_l = np.full(A, -1, dtype=np.int64)
        for a in np.flatnonzero(split):
            nid = int(frontier[a])
            feature[nid] = int(best_feat[a])
            threshold[nid] = float(best_thr[a])
            left[nid] = len(feature)
            right[nid] = len(feature) + 1
            child_l[a] = left[nid]
            new_feat[a] = best_feat[a]
            new_thr[a] = best_thr[a]
            for _ in range(2):
                feature.append(-1)
                threshold.append(0.0)
                left.append(-1)
                right.append(-1)
                value.append(None)
            next_frontier += [left[nid], right[nid]]
        rows = np.flatnonzero(in_play)
        la = local[node_of[rows]]
        moving = split[la]
        rows, la = rows[moving], la[moving]
        go_left = X[rows, new_feat[la]] <= new_thr[la]
        node_of[rows] = np.where(go_left, child_l[la], child_l[la] + 1)
        next_frontier = np.array(next_frontier, dtype=np.int64)
        sums = np.zeros((len(feature), Y.shape[1]))
        np.add.at(sums, node_of, Y)
        cnts = np.bincount(node_of, minlength=len(feature))
        for nid in next_frontier:
            value[nid] = sums[nid] / cnts[nid]
        frontier = next_frontier
        depth += 1

    return Tree(
        feature=np.array(feature, dtype=np.int64),
        threshold=np.array(threshold, dtype=np.float64),
        left=np.array(left, dtype=np.int64),
        right=np.array(right, dtype=np.int64),
        value=np.array(value, dtype=np.float64),
        depth=depth,
    )


def tree_sse(tree: Tree, X, y) -> float:
    y = np.asarray(y, dtype=np.float64)
    pred = tree.predict(X)
    pred = pred[:, 0] if y.ndim == 1 else pred
    return float(np.sum((y - pred) ** 2))


# --------------------------------------------------------------------------- forest


@dataclass
class ForestConfig:
    n_estimators: int = 150
    max_depth: Optional[int] = 20
    min_samples_leaf: int = 1
    max_features: Optional[float] = 1.0 / 3.0
    bootstrap: bool = True
    n_jobs: int = 1


@dataclass
class RandomForest:
    trees: List[Tree]
    n_outputs: int
    config: ForestConfig = field(default_factory=ForestConfig)

    def predict(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        out = np.zeros((len(X), self.n_outputs))
        for t in self.trees:
            out += t.predict(X)
        return out / len(self.trees)


def forest_fit(X, y, cfg: Optional[ForestConfig] = None, seed: int = 0) -> RandomForest:
    """Bagged CART trees. Each tree gets its own child seed, so results do not
    depend on ``n_jobs``; thread scheduling only changes wall-clock time."""
    cfg = cfg or ForestConfig()
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if len(X) == 0:
        raise ValueError("cannot fit a forest on empty data")
    if len(X) != len(y):
        raise ValueError(f"X has {len(X)} rows but y has {len(y)}")
    Y = y[:, None] if y.ndim == 1 else y
    seeds = np.random.SeedSequence(seed).spawn(cfg.n_estimators)

    def grow(ss):
        rng = np.random.default_rng(ss)
        idx = rng.integers(0, len(X), len(X)) if cfg.bootstrap else np.arange(len(X))
        return build_tree(X[idx], Y[idx], cfg.max_depth, cfg.min_samples_leaf, cfg.max_features, rng)

    if cfg.n_jobs and cfg.n_jobs > 1:
        with ThreadPoolExecutor(cfg.n_jobs) as pool:
            trees = list(pool.map(grow, seeds))
    else:
        trees = [grow(s) for s in seeds]
    return RandomForest(trees, Y.shape[1], cfg)


def forest_predict(model: RandomForest, X) -> np.ndarray:
    return model.predict(X)


# --------------------------------------------------------------------------- boosting


@dataclass
class GBTConfig:
    n_estimators: int = 200
    learning_rate: float = 0.05
    max_depth: Optional[int] = 5
    subsample: float = 0.8
    min_samples_leaf: int = 1


@dataclass
class Booster:
    init: float
    learning_rate: float
    trees: List[Tree]

    def predict(self, X, n_rounds: Optional[int] = None) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        out = np.full(len(X), self.init)
        for t in self.trees[:n_rounds]:
            out += self.learning_rate * t.predict(X)[:, 0]
        return out


@dataclass
class GradientBoostedTrees:
    boosters: List[Booster]
    train_loss: np.ndarray          # (n_rounds + 1, n_outputs), full-sample MSE
    config: GBTConfig = field(default_factory=GBTConfig)
    n_features: int = 0

    def predict(self, X) -> np.ndarray:
        return np.column_stack([b.predict(X) for b in self.boosters])


def _fit_booster(X, r, cfg: GBTConfig, rng) -> tuple:
    n = len(X)
    init = float(r.mean())
    pred = np.full(n, init)
    losses = [float(np.mean((r - pred) ** 2))]
    trees = []
    n_sub = max(1, int(round(cfg.subsample * n)))
    for _ in range(cfg.n_estimators):
        resid = r - pred
        idx = np.sort(rng.choice(n, n_sub, replace=False)) if n_sub < n else np.arange(n)
        tree = build_tree(X[idx], resid[idx], cfg.max_depth, cfg.min_samples_leaf, None, rng)
        # leaf values refit on every row, so the full-sample loss can only go down
        leaf = tree.apply(X)
        sums = np.bincount(leaf, weights=resid, minlength=tree.n_nodes)
        cnts = np.bincount(leaf, minlength=tree.n_nodes)
        reached = cnts > 0
        tree.value[reached, 0] = sums[reached] / cnts[reached]
        pred = pred + cfg.learning_rate * tree.value[leaf, 0]
        trees.append(tree)
        losses.append(float(np.mean((r - pred) ** 2)))
    return Booster(init, cfg.learning_rate, trees), losses


def gbt_fit(X, y, cfg: Optional[GBTConfig] = None, seed: int = 0) -> GradientBoostedTrees:
    """Squared-error gradient boosting, one booster per output column."""
    cfg = cfg or GBTConfig()
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if len(X) == 0:
        raise ValueError("cannot fit boosting on empty data")
    if len(X) != len(y):
        raise ValueError(f"X has {len(X)} rows but y has {len(y)}")
    if not 0 < cfg.subsample <= 1:
        raise ValueError("subsample must be in (0, 1]")
    Y = y[:, None] if y.ndim == 1 else y
    rng = np.random.default_rng(seed)
    boosters, losses = [], []
    for d in range(Y.shape[1]):
        b, l = _fit_booster(X, Y[:, d], cfg, rng)
        boosters.append(b)
        losses.append(l)
    return GradientBoostedTrees(boosters, np.array(losses).T, cfg, X.shape[1])


def gbt_predict(model: GradientBoostedTrees, X) -> np.ndarray:
    return model.predict(X)
