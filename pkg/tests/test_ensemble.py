import numpy as np
import pytest

from wavestack.ensemble import (
    GBTMetaRegressor, IdentityRegressor, LayoutMismatch, MeanRegressor, MemorizingRegressor,
    OracleRegressor, StackingEnsemble, _row_key, contiguous_folds, generate_meta_features, meta_columns,
    sample_params, stacked_predict, train_meta, tune_random,
)
from wavestack.learners.hybrids import CNNLSTMRegressor


def windows(rng, n=60, T=6, D=2):
    X = rng.normal(size=(n, T, D))
    y = np.column_stack([X[:, -1, 0] * 2.0, X[:, :, 1].mean(1)])
    return X, y


def test_mean_stub_hand_example():
    X = np.arange(4.0)[:, None]
    y = np.array([1.0, 1.0, 3.0, 3.0])
    mf, _ = generate_meta_features(X, y, {"mean": MeanRegressor()}, K=2)
    assert mf.values[:, 0].tolist() == [3.0, 3.0, 1.0, 1.0]
    assert mf.fold_of.tolist() == [0, 0, 1, 1]


def test_memorizing_sentinel(rng):
    X, y = windows(rng, n=200)
    mf, fitted = generate_meta_features(X, y, {"memo": MemorizingRegressor()}, K=5)
    leaked = np.isclose(mf.values, y).all(axis=1)
    assert leaked.mean() <= 0.01
    # the refit learner has seen every row, so in-sample it does memorize
    assert np.array_equal(fitted["memo"].predict(X), y)


def test_shape_and_layout(rng):
    X, y = windows(rng)
    learners = {"a": MeanRegressor(), "b": MemorizingRegressor(), "c": MeanRegressor()}
    mf, fitted = generate_meta_features(X, y, learners, K=5)
    assert mf.values.shape == (60, 6) and list(fitted) == ["a", "b", "c"]
    assert mf.columns == meta_columns(["a", "b", "c"]) == [
        "a:N1_ideal", "a:M2_ideal", "b:N1_ideal", "b:M2_ideal", "c:N1_ideal", "c:M2_ideal"]


def test_folds_partition_rows():
    for n, K in ((10, 2), (103, 5), (7, 7)):
        folds = contiguous_folds(n, K)
        assert np.array_equal(np.concatenate(folds), np.arange(n))
    with pytest.raises(ValueError):
        contiguous_folds(10, 1)


def test_fold_too_small_rejected(rng):
    class Needy(MeanRegressor):
        min_train_size = 100
    X, y = windows(rng, n=20)
    with pytest.raises(ValueError, match="needy"):
        generate_meta_features(X, y, {"needy": Needy()}, K=2)


def test_passthrough_meta(rng):
    y = rng.normal(size=(80, 2))
    Z = np.column_stack([y[:, 0], rng.normal(size=80), y[:, 1]])
    meta = train_meta(Z, y, {"n_estimators": 5, "learning_rate": 1.0, "max_depth": None, "subsample": 1.0})
    assert np.sqrt(np.mean((meta.predict(Z) - y) ** 2)) < 1e-6


def test_constant_target_meta(rng):
    Z = rng.normal(size=(40, 6))
    meta = train_meta(Z, np.full((40, 2), 7.0), {"n_estimators": 10})
    assert np.allclose(meta.predict(rng.normal(size=(5, 6))), 7.0)


def test_meta_loss_monotone(rng):
    Z = rng.normal(size=(100, 6))
    y = Z[:, :2] + 0.1 * rng.normal(size=(100, 2))
    loss = GBTMetaRegressor().fit(Z, y).train_loss_
    assert np.all(np.diff(loss, axis=0) <= 0.0)


def test_oracle_bases_give_truth(rng):
    X, y = windows(rng, n=150)
    lookup = {_row_key(x): y[i] for i, x in enumerate(X)}
    learners = [(name, OracleRegressor(lookup)) for name in ("p", "c", "k")]
    model = StackingEnsemble(learners, K=5).fit(X, y)
    pred = stacked_predict(model, X)
    r2 = 1 - ((pred - y) ** 2).sum(0) / ((y - y.mean(0)) ** 2).sum(0)
    assert np.all(r2 > 0.999)


def test_permuted_columns_rejected(rng):
    X, y = windows(rng)
    model = StackingEnsemble([("a", MeanRegressor()), ("b", MemorizingRegressor())], K=3).fit(X, y)
    Z, cols = model.meta_features(X)
    model.predict_from_meta(Z, cols)
    perm = [cols[i] for i in (2, 3, 0, 1)]
    with pytest.raises(LayoutMismatch):
        model.predict_from_meta(Z[:, [2, 3, 0, 1]], perm)
    with pytest.raises(LayoutMismatch):
        model.meta_.predict(Z[:, :3])


def test_stacked_predictions_deterministic(rng):
    X, y = windows(rng)
    learners = [("cnn", CNNLSTMRegressor(filters=2, units=3, epochs=1, kernel_size=3, dtype="float64"))]
    a = StackingEnsemble(learners, GBTMetaRegressor(n_estimators=10), K=2, random_state=3).fit(X, y)
    b = StackingEnsemble(learners, GBTMetaRegressor(n_estimators=10), K=2, random_state=3).fit(X, y)
    assert np.array_equal(a.predict(X), b.predict(X)) and np.array_equal(a.predict(X), a.predict(X))


def test_parallel_folds_match_sequential(rng):
    X, y = windows(rng)
    learners = {"cnn": CNNLSTMRegressor(filters=2, units=3, epochs=1, kernel_size=3, dtype="float64"),
                "mean": MeanRegressor()}
    a, _ = generate_meta_features(X, y, learners, K=3, seed=1, n_jobs=1)
    b, _ = generate_meta_features(X, y, learners, K=3, seed=1, n_jobs=3)
    assert np.array_equal(a.values, b.values)


def test_identity_meta(rng):
    X, y = windows(rng)
    model = StackingEnsemble([("m", MeanRegressor())], IdentityRegressor(), K=2).fit(X, y)
    Z, cols = model.meta_features(X)
    assert np.array_equal(model.predict(X), Z)


def test_duplicate_names_rejected(rng):
    X, y = windows(rng)
    with pytest.raises(ValueError):
        StackingEnsemble([("a", MeanRegressor()), ("a", MeanRegressor())]).fit(X, y)


# ---------------------------------------------------------------- tuning


def test_sample_params_kinds(rng):
    p = sample_params({"lr": (1e-4, 1e-2), "units": (2, 4), "act": ["tanh", "relu"], "fixed": 3}, rng)
    assert 1e-4 <= p["lr"] <= 1e-2 and p["units"] in (2, 3, 4) and isinstance(p["units"], int)
    assert p["act"] in ("tanh", "relu") and p["fixed"] == 3


def cnn_factory(params):
    return CNNLSTMRegressor(filters=4, kernel_size=3, epochs=4, dtype="float64", **params)


def test_budget_one(rng):
    X, y = windows(rng)
    res = tune_random({"units": [3]}, 1, 0, (X, y), cnn_factory)
    assert len(res.trials) == 1 and res.best_params == res.trials[0] == {"units": 3}


def test_best_beats_bad_trials(rng):
    X, y = windows(rng, n=120)
    space = {"units": [1, 16], "learning_rate": [1e-2]}
    res = tune_random(space, 6, 1, (X, y), cnn_factory)
    assert res.best_rmse == min(res.val_rmse) and res.trials[res.best_index] == res.best_params
    bad = [s for p, s in zip(res.trials, res.val_rmse) if p["units"] == 1]
    assert all(res.best_rmse <= s for s in bad)


def test_tuning_deterministic(rng):
    X, y = windows(rng)
    a = tune_random({"units": (2, 5)}, 3, 7, (X, y), cnn_factory)
    b = tune_random({"units": (2, 5)}, 3, 7, (X, y), cnn_factory)
    assert a.trials == b.trials and a.val_rmse == b.val_rmse


def test_empty_space_rejected(rng):
    X, y = windows(rng)
    with pytest.raises(ValueError):
        tune_random({}, 1, 0, (X, y), cnn_factory)
    with pytest.raises(ValueError):
        tune_random({"units": [2]}, 0, 0, (X, y), cnn_factory)
