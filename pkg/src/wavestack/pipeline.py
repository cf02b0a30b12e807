"""End-to-end steps shared by the command line and the test-suite."""
from __future__ import annotations

import csv
import io
import logging
import time
from dataclasses import asdict
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .analysis import MetricsReport, StabilityReport, evaluate_predictions, stability_analysis
from .config import RunConfig, build_scenarios
from .dataset import (
    FORMAT_VERSION, TARGETS, ChannelTable, DatasetError, DatasetManifest, PreparedData, dataset_paths,
    file_sha256, load_dataset, prepare, run_scenario_pair,
)
from .ensemble import GBTMetaRegressor, IdentityRegressor, StackingEnsemble
from .learners.hybrids import LEARNER_CLASSES

logger = logging.getLogger(__name__)

OUTPUT_SHORT = {"N1_ideal": "N1", "M2_ideal": "M2"}


# --------------------------------------------------------------------------- data


def generate_table(cfg: RunConfig) -> Tuple[ChannelTable, List[dict]]:
    pairs, meta = [], []
    window = cfg.dataset.window_len
    for i, (spec, duration) in enumerate(build_scenarios(cfg)):
        plant = cfg.plant.build(duration)
        if plant.n_steps < window:
            raise DatasetError(
                f"scenario {i} ({spec.signal.kind}, {duration} s) yields {plant.n_steps} rows, "
                f"fewer than one window of {window}"
            )
        pairs.append(run_scenario_pair(plant, spec, cfg.disturbance.build(cfg.plant.base_delay)))
        meta.append({"index": i, "duration": duration, "signal": asdict(spec.signal),
                     "delay_seed": spec.delay_seed, "noise_seed_master": spec.noise_seed_master,
                     "noise_seed_slave": spec.noise_seed_slave})
    return ChannelTable.from_pairs(pairs), meta


def prepare_data(table: ChannelTable, cfg: RunConfig) -> PreparedData:
    d = cfg.dataset
    return prepare(table, d.window_len, d.train_frac, d.K, d.clip_k)


def write_dataset(cfg: RunConfig, directory: Union[str, Path]) -> Dict[str, Path]:
    table, scen = generate_table(cfg)
    data = prepare_data(table, cfg)
    paths = dataset_paths(directory)
    paths["csv"].parent.mkdir(parents=True, exist_ok=True)
    table.to_csv(paths["csv"])
    data.stats.save(paths["stats"])
    DatasetManifest(
        format_version=FORMAT_VERSION,
        csv_sha256=file_sha256(paths["csv"]),
        n_rows=len(table),
        scenarios=scen,
        plant=asdict(cfg.plant),
        disturbance=asdict(cfg.disturbance),
    ).save(paths["manifest"])
    return paths


def read_dataset(directory: Union[str, Path], cfg: RunConfig) -> Tuple[ChannelTable, PreparedData]:
    table, _ = load_dataset(directory)
    return table, prepare_data(table, cfg)


def window_time(windows, dt: float) -> np.ndarray:
    """Strictly increasing time axis (seconds) over the concatenated scenarios."""
    return windows.end_row.astype(np.float64) * dt


# --------------------------------------------------------------------------- models


def build_learners(cfg: RunConfig, n_jobs: int = 1) -> List[Tuple[str, object]]:
    out = []
    for name, _ in cfg.learners.items():
        params = cfg.learner_params(name)
        if "n_jobs" in LEARNER_CLASSES[name]().get_params() and "n_jobs" not in params:
            params["n_jobs"] = n_jobs
        out.append((name, LEARNER_CLASSES[name](**params)))
    return out


def build_stack(cfg: RunConfig, seed: Optional[int] = None, n_jobs: int = 1, meta=None) -> StackingEnsemble:
    seed = cfg.seeds.train if seed is None else seed
    meta = meta if meta is not None else GBTMetaRegressor(**asdict(cfg.meta))
    return StackingEnsemble(build_learners(cfg, n_jobs), meta, cfg.dataset.K, n_jobs, seed)


def fit_stack(model: StackingEnsemble, data: PreparedData) -> StackingEnsemble:
    train = data.train
    return model.fit(train.X, train.y, t=train.end_row.astype(np.float64))


def split_windows(data: PreparedData, split: str):
    if split not in ("train", "test"):
        raise ValueError(f"split must be 'train' or 'test', got {split!r}")
    return data.train if split == "train" else data.test


def predict_all(model: StackingEnsemble, windows) -> Tuple[Dict[str, np.ndarray], np.ndarray, float]:
    """Base and meta predictions (normalized units) plus meta-features; returns inference seconds."""
    t0 = time.perf_counter()
    t = windows.end_row.astype(np.float64)
    base = model.base_predictions(windows.X, t)
    Z = np.hstack([base[n] for n in model.base_learners_])
    meta = model.predict_from_meta(Z, model.columns_)
    seconds = time.perf_counter() - t0
    preds = dict(base)
    preds["meta"] = meta
    return preds, Z, seconds


def evaluate(model: StackingEnsemble, data: PreparedData, split: str = "test"
             ) -> Tuple[MetricsReport, Dict[str, np.ndarray]]:
    """Metrics in physical units for every base learner and the meta-model."""
    win = split_windows(data, split)
    preds, _, seconds = predict_all(model, win)
    inv = data.preprocessor.inverse_transform_targets
    truth = inv(win.y)
    phys = {name: inv(p) for name, p in preds.items()}
    report = evaluate_predictions(truth, phys, [OUTPUT_SHORT.get(o, o) for o in TARGETS], split)
    report.timings = {name: {"train_s": float(model.fit_seconds_.get(name, float("nan"))),
                             "inference_s": seconds} for name in phys}
    return report, phys


def stability(model: StackingEnsemble, data: PreparedData, pair_budget: int, seed: int,
              power_iters: int = 100, epsilon: float = 1e-5) -> StabilityReport:
    _, Z, _ = predict_all(model, data.test)
    meta = model.meta_
    rep = stability_analysis(lambda A: meta.predict(A), Z, pair_budget, seed,
                             [OUTPUT_SHORT.get(o, o) for o in model.outputs_]
                             if not isinstance(meta, IdentityRegressor) else list(model.columns_),
                             power_iters, epsilon)
    if isinstance(meta, IdentityRegressor):
        rep.note = "meta-model is the identity map; joint Lipschitz constant is 1 by construction"
    return rep


# --------------------------------------------------------------------------- overlays


def overlay_columns(learner_names: Sequence[str], outputs: Sequence[str] = ("N1", "M2")) -> List[str]:
    cols = ["t"]
    for out in outputs:
        cols.append(f"truth_{out}")
        cols += [f"pred_{out}_base{i + 1}" for i in range(len(learner_names))]
        cols.append(f"pred_{out}_meta")
    return cols


def overlay_table(t, truth, base_preds: Sequence[np.ndarray], meta_pred, outputs=("N1", "M2")):
    """Stack time, truth, base and meta series column-wise; all must share a length."""
    series = [np.asarray(t), np.asarray(truth), *map(np.asarray, base_preds), np.asarray(meta_pred)]
    lengths = {len(s) for s in series}
    if len(lengths) != 1:
        raise ValueError(f"series lengths differ: {sorted(lengths)}")
    cols = [series[0]]
    for d in range(len(outputs)):
        cols.append(series[1][:, d])
        cols += [b[:, d] for b in series[2:-1]]
        cols.append(series[-1][:, d])
    return np.column_stack(cols)


def overlay_csv(model: StackingEnsemble, data: PreparedData, dt: float) -> str:
    _, phys = evaluate(model, data, "test")
    test = data.test
    truth = data.preprocessor.inverse_transform_targets(test.y)
    names = list(model.base_learners_)
    table = overlay_table(window_time(test, dt), truth, [phys[n] for n in names], phys["meta"])
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(overlay_columns(names))
    for row in table:
        w.writerow([f"{v:.17g}" for v in row])
    return buf.getvalue()
