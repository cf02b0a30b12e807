import json

import numpy as np
import pytest

from wavestack.ensemble import GBTMetaRegressor, IdentityRegressor, MeanRegressor, StackingEnsemble
from wavestack.learners.hybrids import CNNLSTMRegressor, LSTMKMeansRFRegressor, ProphetLSTMRegressor
from wavestack.persistence import (
    ArtifactError, atomic_directory, load_estimator, load_stacked, read_extra, save_estimator, save_stacked,
)

pytestmark = pytest.mark.filterwarnings("ignore::wavestack.learners.trend.RankDeficientWarning")

FAST = dict(units=3, epochs=1, batch_size=16)


@pytest.fixture
def data(rng):
    X = rng.normal(size=(50, 8, 3))
    return X, np.column_stack([X[:, -1, 0], X[:, :, 1].mean(1)])


@pytest.mark.parametrize("est", [
    ProphetLSTMRegressor(**FAST, seasonalities=((20.0, 2),)),
    CNNLSTMRegressor(**FAST, filters=2, kernel_size=3),
    LSTMKMeansRFRegressor(**FAST, n_clusters=2, n_estimators=3),
    MeanRegressor(),
], ids=lambda e: type(e).__name__)
def test_bit_identical_round_trip(est, data, tmp_path):
    X, y = data
    est.fit(X, y)
    save_estimator(est, tmp_path / "m", extra={"note": "x"})
    back = load_estimator(tmp_path / "m")
    assert type(back) is type(est) and back.get_params() == est.get_params()
    assert np.array_equal(back.predict(X), est.predict(X))
    assert read_extra(tmp_path / "m") == {"note": "x"}


def test_meta_round_trip(rng, tmp_path):
    Z, y = rng.normal(size=(60, 4)), rng.normal(size=(60, 2))
    meta = GBTMetaRegressor(n_estimators=15).fit(Z, y, columns=list("abcd"))
    save_estimator(meta, tmp_path / "g")
    back = load_estimator(tmp_path / "g")
    assert np.array_equal(back.predict(Z, list("abcd")), meta.predict(Z, list("abcd")))
    assert np.array_equal(back.train_loss_, meta.train_loss_)


def test_stack_round_trip(data, tmp_path):
    X, y = data
    learners = [("cnn", CNNLSTMRegressor(**FAST, filters=2, kernel_size=3)), ("mean", MeanRegressor())]
    model = StackingEnsemble(learners, GBTMetaRegressor(n_estimators=10), K=2).fit(X, y)
    save_stacked(model, tmp_path / "s", {"data_format_version": 1})
    back = load_stacked(tmp_path / "s")
    assert back.columns_ == model.columns_ and back.outputs_ == model.outputs_
    assert np.array_equal(back.predict(X), model.predict(X))
    assert np.array_equal(back.meta_features_.values, model.meta_features_.values)
    assert np.array_equal(load_estimator(tmp_path / "s").predict(X), model.predict(X))


def test_identity_stack_round_trip(data, tmp_path):
    X, y = data
    model = StackingEnsemble([("m", MeanRegressor())], IdentityRegressor(), K=2).fit(X, y)
    save_stacked(model, tmp_path / "s")
    assert isinstance(load_stacked(tmp_path / "s").meta_, IdentityRegressor)


def test_version_mismatch_rejected(data, tmp_path):
    X, y = data
    save_estimator(MeanRegressor().fit(X, y), tmp_path / "m")
    path = tmp_path / "m" / "manifest.json"
    manifest = json.loads(path.read_text())
    manifest["version"] = 99
    path.write_text(json.dumps(manifest))
    with pytest.raises(ArtifactError):
        load_estimator(tmp_path / "m")


def test_unknown_class_rejected(data, tmp_path):
    X, y = data
    save_estimator(MeanRegressor().fit(X, y), tmp_path / "m")
    path = tmp_path / "m" / "manifest.json"
    manifest = json.loads(path.read_text())
    manifest["class"] = "os.system"
    path.write_text(json.dumps(manifest))
    with pytest.raises(ArtifactError):
        load_estimator(tmp_path / "m")


def test_missing_artifact(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_stacked(tmp_path / "nothing")


def test_atomic_directory_leaves_nothing_on_failure(tmp_path):
    final = tmp_path / "model"
    with pytest.raises(RuntimeError):
        with atomic_directory(final) as tmp:
            (tmp / "partial").write_text("x")
            raise RuntimeError("abort")
    assert not final.exists() and list(tmp_path.iterdir()) == []


def test_atomic_directory_replaces(tmp_path):
    final = tmp_path / "model"
    final.mkdir()
    (final / "old").write_text("1")
    with atomic_directory(final) as tmp:
        (tmp / "new").write_text("2")
    assert sorted(p.name for p in final.iterdir()) == ["new"]
    assert sorted(p.name for p in tmp_path.iterdir()) == ["model"]
