"""Lloyd's k-means with k-means++ seeding."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import List

import numpy as np


@dataclass
class KMeansModel:
    centroids: np.ndarray
    inertia_history: List[float] = field(default_factory=list)
    n_iter: int = 0
    converged: bool = False

    @property
    def k(self) -> int:
        return len(self.centroids)

    @property
    def inertia(self) -> float:
        return self.inertia_history[-1] if self.inertia_history else float("nan")


def _sq_dists(points, centroids):
    d = (
        np.sum(points * points, axis=1)[:, None]
        - 2.0 * points @ centroids.T
        + np.sum(centroids * centroids, axis=1)[None, :]
    )
    return np.maximum(d, 0.0)


def _plus_plus(points, k, rng):
    n = len(points)
    centers = [int(rng.integers(n))]
    d2 = _sq_dists(points, points[centers])[:, 0]
    for _ in range(1, k):
        total = d2.sum()
        if total > 0:
            nxt = int(rng.choice(n, p=d2 / total))
        else:
            nxt = int(rng.integers(n))
        centers.append(nxt)
        d2 = np.minimum(d2, _sq_dists(points, points[[nxt]])[:, 0])
    return points[centers].copy()


def kmeans_fit(points, k: int = 5, seed: int = 0, max_iter: int = 300) -> KMeansModel:
    """Cluster ``points`` (n, d). Iterates until the assignment stops changing.

    ``inertia_history[i]`` is the inertia of the i-th assignment against the
    centroids it was assigned to; it never increases.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2:
        raise ValueError("points must be 2-D (n, d)")
    n = len(points)
    if k < 1:
        raise ValueError("k must be >= 1")
    if n < k:
        raise ValueError(f"need at least k={k} points, got {n}")
    rng = np.random.default_rng(seed)
    centroids = _plus_plus(points, k, rng)
    labels = None
    history: List[float] = []
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        d2 = _sq_dists(points, centroids)
        new_labels = d2.argmin(axis=1)
        history.append(float(d2[np.arange(n), new_labels].sum()))
        if labels is not None and np.array_equal(new_labels, labels):
            converged = True
            break
        labels = new_labels
        counts = np.bincount(labels, minlength=k)
        for c in range(k):
            if counts[c]:
                centroids[c] = points[labels == c].mean(axis=0)
        for c in np.flatnonzero(counts == 0):
            # move an empty centroid onto the worst-served point
            far = int(d2[np.arange(n), labels].argmax())
            centroids[c] = points[far]
            labels[far] = c
            d2[far] = 0.0
    return KMeansModel(centroids, history, it, converged)


def kmeans_assign(model: KMeansModel, points) -> np.ndarray:
    points = np.asarray(points, dtype=np.float64)
    return _sq_dists(points, model.centroids).argmin(axis=1)


def one_hot(labels, k: int) -> np.ndarray:
    out = np.zeros((len(labels), k))
    out[np.arange(len(labels)), labels] = 1.0
    return out
