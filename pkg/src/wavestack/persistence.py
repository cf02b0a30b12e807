"""Versioned on-disk format for fitted estimators.

An artifact is a directory holding ``manifest.json`` (class name, format
version, constructor parameters, scalar state) and ``arrays.npz`` (every
numeric parameter, stored losslessly). Stacked models nest one artifact per
base learner plus one for the meta-learner.
"""
from __future__ import annotations

import json
import os
import shutil
import tempfile
from dataclasses import asdict
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .ensemble import GBTMetaRegressor, IdentityRegressor, MeanRegressor, MetaFeatures, StackingEnsemble
from .learners.cluster import KMeansModel
from .learners.hybrids import CNNLSTMRegressor, LSTMKMeansRFRegressor, ProphetLSTMRegressor
from .learners.nn import Sequential, TrainHistory
from .learners.trees import Booster, ForestConfig, GBTConfig, GradientBoostedTrees, RandomForest, Tree
from .learners.trend import TrendSeasonConfig, TrendSeasonModel

FORMAT_NAME = "wavestack-model"
FORMAT_VERSION = 1
MANIFEST = "manifest.json"
ARRAYS = "arrays.npz"


class ArtifactError(ValueError):
    pass


CLASSES = {
    cls.__name__: cls
    for cls in (ProphetLSTMRegressor, CNNLSTMRegressor, LSTMKMeansRFRegressor,
                GBTMetaRegressor, IdentityRegressor, MeanRegressor, StackingEnsemble)
}


def _jsonable(v):
    if isinstance(v, (tuple, list)):
        return [_jsonable(x) for x in v]
    if isinstance(v, dict):
        return {k: _jsonable(x) for k, x in v.items()}
    if isinstance(v, np.generic):
        return v.item()
    return v


def _tupleize(v):
    if isinstance(v, list):
        return tuple(_tupleize(x) for x in v)
    return v


class _Arrays:
    """Collects arrays under unique keys while encoding."""

    def __init__(self, data: Optional[dict] = None):
        self.data = dict(data or {})

    def put(self, key: str, arr) -> str:
        if key in self.data:
            raise KeyError(f"duplicate array key {key}")
        self.data[key] = np.asarray(arr)
        return key

    def get(self, key: str) -> np.ndarray:
        return self.data[key]


# --------------------------------------------------------------------------- component codecs


def _enc_net(net: Sequential, arrs: _Arrays, prefix: str) -> dict:
    keys = [arrs.put(f"{prefix}{i}.{name}", p) for i, name, p in net.parameters()]
    return {"spec": net.spec(), "dtype": np.dtype(net.dtype).name, "keys": keys}


def _dec_net(state: dict, arrs: _Arrays) -> Sequential:
    net = Sequential.from_spec(state["spec"], np.dtype(state["dtype"]).type)
    for (i, name, p), key in zip(net.parameters(), state["keys"]):
        src = arrs.get(key)
        if src.shape != p.shape or src.dtype != p.dtype:
            raise ArtifactError(f"parameter {key} has shape {src.shape}/{src.dtype}, expected {p.shape}/{p.dtype}")
        net.layers[i].params[name] = src.copy()
    return net


def _enc_tree(tree: Tree, arrs: _Arrays, prefix: str) -> str:
    for k, v in tree.to_arrays(prefix).items():
        arrs.put(k, v)
    return prefix


def _dec_tree(prefix: str, arrs: _Arrays) -> Tree:
    return Tree.from_arrays(arrs.data, prefix)


def _enc_forest(rf: RandomForest, arrs: _Arrays, prefix: str) -> dict:
    return {"n_outputs": rf.n_outputs, "config": asdict(rf.config),
            "trees": [_enc_tree(t, arrs, f"{prefix}t{i}.") for i, t in enumerate(rf.trees)]}


def _dec_forest(state: dict, arrs: _Arrays) -> RandomForest:
    return RandomForest([_dec_tree(p, arrs) for p in state["trees"]], state["n_outputs"],
                        ForestConfig(**state["config"]))


def _enc_gbt(g: GradientBoostedTrees, arrs: _Arrays, prefix: str) -> dict:
    arrs.put(f"{prefix}train_loss", g.train_loss)
    return {
        "config": asdict(g.config), "n_features": g.n_features,
        "boosters": [
            {"init": b.init, "learning_rate": b.learning_rate,
             "trees": [_enc_tree(t, arrs, f"{prefix}b{d}t{i}.") for i, t in enumerate(b.trees)]}
            for d, b in enumerate(g.boosters)
        ],
    }


def _dec_gbt(state: dict, arrs: _Arrays, prefix: str) -> GradientBoostedTrees:
    boosters = [Booster(b["init"], b["learning_rate"], [_dec_tree(p, arrs) for p in b["trees"]])
                for b in state["boosters"]]
    return GradientBoostedTrees(boosters, arrs.get(f"{prefix}train_loss"), GBTConfig(**state["config"]),
                                state["n_features"])


def _enc_trend(m: TrendSeasonModel, arrs: _Arrays, prefix: str) -> dict:
    for name in ("changepoints", "coef_trend", "coef_season", "coef_exog", "col_scale"):
        arrs.put(prefix + name, getattr(m, name))
    cfg = asdict(m.config)
    return {"config": _jsonable(cfg), "ridge_used": m.ridge_used, "prefix": prefix}


def _dec_trend(state: dict, arrs: _Arrays) -> TrendSeasonModel:
    cfg = dict(state["config"])
    cfg["seasonalities"] = _tupleize(cfg["seasonalities"])
    p = state["prefix"]
    return TrendSeasonModel(TrendSeasonConfig(**cfg), *(arrs.get(p + k) for k in (
        "changepoints", "coef_trend", "coef_season", "coef_exog", "col_scale")), ridge_used=state["ridge_used"])


def _enc_history(h: TrainHistory) -> dict:
    return asdict(h)


# --------------------------------------------------------------------------- estimator codecs


def _encode_state(est, arrs: _Arrays) -> dict:
    common = {k: _jsonable(getattr(est, k)) for k in ("n_features_in_", "n_outputs_") if hasattr(est, k)}
    if isinstance(est, ProphetLSTMRegressor):
        return {**common,
                "trend_models": [_enc_trend(m, arrs, f"trend{d}.") for d, m in enumerate(est.trend_models_)],
                "nets": [_enc_net(n, arrs, f"net{d}.") for d, n in enumerate(est.nets_)],
                "histories": [_enc_history(h) for h in est.histories_]}
    if isinstance(est, CNNLSTMRegressor):
        return {**common, "net": _enc_net(est.net_, arrs, "net."), "history": _enc_history(est.history_)}
    if isinstance(est, LSTMKMeansRFRegressor):
        km = est.kmeans_
        arrs.put("kmeans.centroids", km.centroids)
        return {**common, "net": _enc_net(est.net_, arrs, "net."), "history": _enc_history(est.history_),
                "kmeans": {"inertia_history": km.inertia_history, "n_iter": km.n_iter, "converged": km.converged},
                "forest": _enc_forest(est.forest_, arrs, "forest.")}
    if isinstance(est, GBTMetaRegressor):
        return {**common, "columns": est.columns_, "gbt": _enc_gbt(est.model_, arrs, "gbt.")}
    if isinstance(est, IdentityRegressor):
        return {**common, "columns": est.columns_}
    if isinstance(est, MeanRegressor):
        arrs.put("mean", est.mean_)
        return common
    raise ArtifactError(f"cannot serialize {type(est).__name__}")


def _decode_state(est, state: dict, arrs: _Arrays):
    for k in ("n_features_in_", "n_outputs_"):
        if k in state:
            setattr(est, k, state[k])
    if isinstance(est, ProphetLSTMRegressor):
        est.trend_models_ = [_dec_trend(s, arrs) for s in state["trend_models"]]
        est.nets_ = [_dec_net(s, arrs) for s in state["nets"]]
        est.histories_ = [TrainHistory(**h) for h in state["histories"]]
    elif isinstance(est, CNNLSTMRegressor):
        est.net_ = _dec_net(state["net"], arrs)
        est.history_ = TrainHistory(**state["history"])
    elif isinstance(est, LSTMKMeansRFRegressor):
        est.net_ = _dec_net(state["net"], arrs)
        est.history_ = TrainHistory(**state["history"])
        km = state["kmeans"]
        est.kmeans_ = KMeansModel(arrs.get("kmeans.centroids"), km["inertia_history"], km["n_iter"], km["converged"])
        est.forest_ = _dec_forest(state["forest"], arrs)
    elif isinstance(est, GBTMetaRegressor):
        est.columns_ = state["columns"]
        est.model_ = _dec_gbt(state["gbt"], arrs, "gbt.")
    elif isinstance(est, IdentityRegressor):
        est.columns_ = state["columns"]
    elif isinstance(est, MeanRegressor):
        est.mean_ = arrs.get("mean")
    return est


def _describe(est) -> dict:
    return {"class": type(est).__name__, "params": _jsonable(est.get_params(deep=False))}


def _construct(desc: dict):
    name = desc["class"]
    if name not in CLASSES or name == "StackingEnsemble":
        raise ArtifactError(f"unknown or disallowed estimator class {name!r}")
    params = {k: _tupleize(v) if k == "seasonalities" else v for k, v in desc["params"].items()}
    return CLASSES[name](**params)


# --------------------------------------------------------------------------- public API


def _write_manifest(directory: Path, manifest: dict) -> None:
    (directory / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True))


def _read_manifest(directory: Path) -> dict:
    path = directory / MANIFEST
    if not path.exists():
        raise FileNotFoundError(f"no model artifact at {directory} (missing {MANIFEST})")
    manifest = json.loads(path.read_text())
    if manifest.get("format") != FORMAT_NAME:
        raise ArtifactError(f"{path} is not a {FORMAT_NAME} artifact")
    if manifest.get("version") != FORMAT_VERSION:
        raise ArtifactError(f"artifact format version {manifest.get('version')} != supported {FORMAT_VERSION}")
    return manifest


def save_estimator(est, directory: Union[str, Path], extra: Optional[dict] = None) -> Path:
    """Write a fitted estimator (not a stack) to ``directory``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    arrs = _Arrays()
    manifest = {"format": FORMAT_NAME, "version": FORMAT_VERSION, **_describe(est),
                "state": _encode_state(est, arrs), "extra": _jsonable(extra or {})}
    with open(d / ARRAYS, "wb") as fh:
        np.savez(fh, **arrs.data)
    _write_manifest(d, manifest)
    return d


def load_estimator(directory: Union[str, Path]):
    d = Path(directory)
    manifest = _read_manifest(d)
    if manifest["class"] == "StackingEnsemble":
        return load_stacked(d)
    est = _construct(manifest)
    with np.load(d / ARRAYS, allow_pickle=False) as npz:
        arrs = _Arrays({k: npz[k] for k in npz.files})
    return _decode_state(est, manifest["state"], arrs)


def save_stacked(model: StackingEnsemble, directory: Union[str, Path], extra: Optional[dict] = None) -> Path:
    """Directory layout: ``base/<name>/``, ``meta/``, ``meta_features.npz``, ``manifest.json``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    names = list(model.base_learners_)
    for name in names:
        save_estimator(model.base_learners_[name], d / "base" / name)
    save_estimator(model.meta_, d / "meta")
    mf = model.meta_features_
    with open(d / "meta_features.npz", "wb") as fh:
        np.savez(fh, values=mf.values, fold_of=mf.fold_of)
    manifest = {
        "format": FORMAT_NAME, "version": FORMAT_VERSION, "class": "StackingEnsemble",
        "params": {"K": model.K, "n_jobs": model.n_jobs, "random_state": _jsonable(model.random_state)},
        "learners": [{"name": n, **_describe(dict(model.learners)[n])} for n in names],
        "meta": _describe(model.meta) if model.meta is not None else None,
        "columns": model.columns_,
        "outputs": model.outputs_,
        "fit_seconds": model.fit_seconds_,
        "extra": _jsonable(extra or {}),
    }
    _write_manifest(d, manifest)
    return d


def load_stacked(directory: Union[str, Path]) -> StackingEnsemble:
    d = Path(directory)
    manifest = _read_manifest(d)
    if manifest["class"] != "StackingEnsemble":
        raise ArtifactError(f"{d} holds a {manifest['class']}, not a stacked model")
    learners = [(e["name"], _construct(e)) for e in manifest["learners"]]
    meta_proto = _construct(manifest["meta"]) if manifest["meta"] else None
    model = StackingEnsemble(learners, meta_proto, **manifest["params"])
    model.base_learners_ = {e["name"]: load_estimator(d / "base" / e["name"]) for e in manifest["learners"]}
    model.meta_ = load_estimator(d / "meta")
    model.columns_ = manifest["columns"]
    model.outputs_ = manifest["outputs"]
    model.fit_seconds_ = manifest["fit_seconds"]
    with np.load(d / "meta_features.npz", allow_pickle=False) as npz:
        model.meta_features_ = MetaFeatures(npz["values"], list(model.columns_), npz["fold_of"],
                                            dict(model.fit_seconds_))
    expected = [f"{e['name']}:{o}" for e in manifest["learners"] for o in model.outputs_]
    if expected != model.columns_:
        raise ArtifactError("manifest column layout is inconsistent with its learner list")
    return model


def read_extra(directory: Union[str, Path]) -> dict:
    return _read_manifest(Path(directory)).get("extra", {})


def atomic_directory(final: Union[str, Path]):
    """Context manager yielding a temp dir that replaces ``final`` only on success."""
    return _AtomicDir(Path(final))


class _AtomicDir:
    def __init__(self, final: Path):
        self.final = final

    def __enter__(self) -> Path:
        self.final.parent.mkdir(parents=True, exist_ok=True)
        self.tmp = Path(tempfile.mkdtemp(prefix=f".{self.final.name}.", dir=self.final.parent))
        return self.tmp

    def __exit__(self, exc_type, exc, tb):
        if exc_type is not None:
            shutil.rmtree(self.tmp, ignore_errors=True)
            return False
        if self.final.exists():
            old = self.final.with_name(self.final.name + ".old")
            shutil.rmtree(old, ignore_errors=True)
            os.replace(self.final, old)
            os.replace(self.tmp, self.final)
            shutil.rmtree(old, ignore_errors=True)
        else:
            os.replace(self.tmp, self.final)
        return False
