import numpy as np
import pytest

from wavestack.learners.cluster import kmeans_assign, kmeans_fit, one_hot


def test_two_cluster_example():
    pts = np.array([[0, 0], [0, 1], [10, 0], [10, 1]], dtype=float)
    model = kmeans_fit(pts, k=2, seed=0)
    cents = sorted(map(tuple, model.centroids))
    assert cents == [(0.0, 0.5), (10.0, 0.5)]


def test_k_equals_n_gives_zero_inertia(rng):
    pts = rng.normal(size=(6, 3))
    assert kmeans_fit(pts, k=6, seed=1).inertia == 0.0


@pytest.mark.parametrize("seed", range(5))
def test_inertia_monotone(seed):
    rng = np.random.default_rng(seed)
    pts = np.vstack([rng.normal(c, 1.0, size=(80, 2)) for c in (-4, 0, 4)])
    model = kmeans_fit(pts, k=5, seed=seed)
    assert np.all(np.diff(model.inertia_history) <= 0.0)


def test_converged_assignment_is_nearest(rng):
    pts = rng.normal(size=(300, 4))
    model = kmeans_fit(pts, k=5, seed=2)
    assert model.converged
    d = ((pts[:, None, :] - model.centroids[None]) ** 2).sum(-1)
    assert np.array_equal(kmeans_assign(model, pts), d.argmin(1))
    labels = kmeans_assign(model, pts)
    for c in range(5):
        assert np.allclose(model.centroids[c], pts[labels == c].mean(0))


def test_duplicate_points_no_empty_cluster():
    pts = np.vstack([np.zeros((20, 2)), np.ones((3, 2))])
    model = kmeans_fit(pts, k=3, seed=0)
    assert np.all(np.isfinite(model.centroids))


def test_too_few_points():
    with pytest.raises(ValueError):
        kmeans_fit(np.zeros((3, 2)), k=5)


def test_deterministic(rng):
    pts = rng.normal(size=(100, 3))
    assert np.array_equal(kmeans_fit(pts, 4, seed=9).centroids, kmeans_fit(pts, 4, seed=9).centroids)


def test_one_hot():
    assert one_hot(np.array([0, 2]), 3).tolist() == [[1, 0, 0], [0, 0, 1]]
