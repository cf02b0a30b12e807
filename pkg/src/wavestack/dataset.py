"""Paired ideal/disturbed channel traces turned into normalized training windows."""
from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.interpolate import CubicSpline
from sklearn.base import BaseEstimator, TransformerMixin

from .channel_sim import (
    DelayConfig,
    Disturbance,
    NoiseConfig,
    PlantConfig,
    ScenarioResult,
    generate_delay_profile,
    simulate_scenario,
)

FEATURES = ("M1_d", "N2_d", "Td")
TARGETS = ("N1_ideal", "M2_ideal")
CSV_COLUMNS = ("scenario_id", "t") + FEATURES + TARGETS
FORMAT_VERSION = 1

SIGNAL_KINDS = ("step", "sine", "spline")


class DatasetError(ValueError):
    """Malformed, inconsistent or too-short channel data."""


@dataclass
class SignalSpec:
    kind: str = "step"
    amplitude: float = 1.0
    frequency: float = 0.0
    knots: Optional[List[Tuple[float, float]]] = None
    n_knots: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.kind not in SIGNAL_KINDS:
            raise ValueError(f"unknown signal kind {self.kind!r}; expected one of {SIGNAL_KINDS}")
        if not math.isfinite(self.amplitude):
            raise ValueError("signal amplitude must be finite")
        if self.knots is not None:
            ts = [k[0] for k in self.knots]
            if any(b <= a for a, b in zip(ts, ts[1:])):
                raise ValueError("spline knots must be strictly increasing in t")


def _spline_knots(spec: SignalSpec, duration: float):
    if spec.knots is not None:
        arr = np.asarray(spec.knots, dtype=float)
        return arr[:, 0], arr[:, 1]
    rng = np.random.default_rng(spec.seed)
    kt = np.linspace(0.0, duration, spec.n_knots)
    kv = rng.uniform(-spec.amplitude, spec.amplitude, size=spec.n_knots)
    kv[0] = 0.0
    return kt, kv


def generate_input_signal(spec: SignalSpec, duration: float, dt: float) -> np.ndarray:
    """Operator force profile sampled at ``dt``."""
    n = duration / dt
    if abs(n - round(n)) > 1e-6:
        raise ValueError(f"duration {duration} is not a whole number of steps of {dt}")
    t = np.arange(int(round(n))) * dt
    if spec.kind == "step":
        return np.where(t >= duration / 10.0, float(spec.amplitude), 0.0)
    if spec.kind == "sine":
        return spec.amplitude * np.sin(2.0 * np.pi * spec.frequency * t)
    kt, kv = _spline_knots(spec, duration)
    cs = CubicSpline(kt, kv, bc_type="clamped")
    return cs(np.clip(t, kt[0], kt[-1]))


# --------------------------------------------------------------------------- scenarios


@dataclass
class ScenarioSpec:
    signal: SignalSpec
    delay_seed: int = 0
    noise_seed_master: int = 1
    noise_seed_slave: int = 2


@dataclass
class DisturbanceConfig:
    base_delay: float = 0.1
    delay_variance: float = 0.001
    delay_sample_period: float = 2.0
    delay_max: float = 1.0
    noise_power: float = 1.0
    noise_sample_period: float = 0.1


def run_scenario_pair(
    plant: PlantConfig, spec: ScenarioSpec, dist: DisturbanceConfig
) -> Tuple[ScenarioResult, ScenarioResult]:
    """Ideal and disturbed runs driven by the same operator force."""
    fh = generate_input_signal(spec.signal, plant.duration, plant.dt)
    ideal = simulate_scenario(plant, fh)
    profile = generate_delay_profile(
        DelayConfig(
            base_delay=dist.base_delay,
            variance=dist.delay_variance,
            sample_period=dist.delay_sample_period,
            seed=spec.delay_seed,
            delay_max=dist.delay_max,
        ),
        plant.duration,
    )
    disturbed = simulate_scenario(
        plant,
        fh,
        Disturbance(
            profile,
            NoiseConfig(dist.noise_power, dist.noise_sample_period, spec.noise_seed_master),
            NoiseConfig(dist.noise_power, dist.noise_sample_period, spec.noise_seed_slave),
        ),
    )
    return ideal, disturbed


@dataclass
class ChannelTable:
    """Row-level dataset: one row per time step, scenarios stacked in order."""

    scenario_id: np.ndarray
    t: np.ndarray
    features: np.ndarray  # (n, 3): M1_d, N2_d, Td
    targets: np.ndarray  # (n, 2): N1_ideal, M2_ideal

    def __len__(self) -> int:
        return self.t.size

    @classmethod
    def from_pairs(cls, pairs: Sequence[Tuple[ScenarioResult, ScenarioResult]]) -> "ChannelTable":
        sid, t, feats, targs = [], [], [], []
        for i, (ideal, dist) in enumerate(pairs):
            if len(ideal) != len(dist):
                raise DatasetError(f"scenario {i}: ideal and disturbed runs differ in length")
            sid.append(np.full(len(ideal), i, dtype=int))
            t.append(ideal.t)
            feats.append(np.column_stack([dist.M1, dist.N2, dist.Td]))
            targs.append(np.column_stack([ideal.N1, ideal.M2]))
        return cls(np.concatenate(sid), np.concatenate(t), np.vstack(feats), np.vstack(targs))

    def scenario_bounds(self) -> List[Tuple[int, int]]:
        """[start, stop) row ranges of contiguous scenarios, in order."""
        sid = self.scenario_id
        if sid.size == 0:
            return []
        cuts = np.flatnonzero(np.diff(sid) != 0) + 1
        starts = np.concatenate([[0], cuts])
        stops = np.concatenate([cuts, [sid.size]])
        return list(zip(starts.tolist(), stops.tolist()))

    def to_csv(self, path: Union[str, Path]) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(CSV_COLUMNS)
            for s, t, f, y in zip(self.scenario_id, self.t, self.features, self.targets):
                w.writerow([int(s)] + [f"{v:.17g}" for v in (t, *f, *y)])

    @classmethod
    def from_csv(cls, path: Union[str, Path]) -> "ChannelTable":
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            try:
                header = next(reader)
            except StopIteration:
                raise DatasetError(f"{path}: empty dataset file") from None
            if tuple(header) != CSV_COLUMNS:
                raise DatasetError(f"{path}: unexpected header {header}")
            try:
                rows = [[float(v) for v in r] for r in reader]
            except ValueError as exc:
                raise DatasetError(f"{path}: non-numeric value ({exc})") from None
        arr = np.asarray(rows, dtype=float)
        if arr.ndim != 2 or arr.shape[1] != len(CSV_COLUMNS) or not np.all(np.isfinite(arr)):
            raise DatasetError(f"{path}: malformed rows")
        return cls(arr[:, 0].astype(int), arr[:, 1], arr[:, 2:5].copy(), arr[:, 5:7].copy())


# --------------------------------------------------------------------------- preprocessing


@dataclass
class NormStats:
    feature_mean: np.ndarray
    feature_std: np.ndarray
    target_mean: np.ndarray
    target_std: np.ndarray

    def to_dict(self) -> dict:
        return {
            "features": list(FEATURES),
            "targets": list(TARGETS),
            "feature_mean": self.feature_mean.tolist(),
            "feature_std": self.feature_std.tolist(),
            "target_mean": self.target_mean.tolist(),
            "target_std": self.target_std.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(*(np.asarray(d[k], dtype=float) for k in
                     ("feature_mean", "feature_std", "target_mean", "target_std")))

    def save(self, path: Union[str, Path]) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path: Union[str, Path]) -> "NormStats":
        return cls.from_dict(json.loads(Path(path).read_text()))


def normalize_fit(rows) -> Tuple[np.ndarray, np.ndarray]:
    """Population mean and std per column; constant columns are rejected."""
    rows = np.asarray(rows, dtype=float)
    if rows.ndim == 1:
        rows = rows[:, None]
    if rows.shape[0] < 2:
        raise DatasetError("need at least 2 rows to fit normalization")
    mean = rows.mean(axis=0)
    std = rows.std(axis=0)
    bad = np.flatnonzero(~(std > 0))
    if bad.size:
        raise DatasetError(f"zero-variance column(s) {bad.tolist()} cannot be normalized")
    return mean, std


def normalize_apply(rows, mean, std) -> np.ndarray:
    return (np.asarray(rows, dtype=float) - mean) / std


def denormalize(rows, mean, std) -> np.ndarray:
    return np.asarray(rows, dtype=float) * std + mean


def clean_outliers(rows, k: float = 5.0, mean=None, std=None) -> np.ndarray:
    """Clip values outside mean ± k·std, column-wise. Rows are never dropped."""
    if not k > 0:
        raise ValueError(f"k must be positive, got {k}")
    rows = np.asarray(rows, dtype=float)
    if mean is None or std is None:
        mean = rows.mean(axis=0)
        std = rows.std(axis=0)
    return np.clip(rows, mean - k * std, mean + k * std)


@dataclass
class WindowedDataset:
    X: np.ndarray  # (n_windows, window_len, n_features)
    y: np.ndarray  # (n_windows, n_targets)
    t: np.ndarray  # scenario-local time of each window's last step
    scenario_id: np.ndarray
    end_row: np.ndarray  # global row index of each window's last step
    window_len: int = 100

    def __len__(self) -> int:
        return self.y.shape[0]

    def subset(self, idx) -> "WindowedDataset":
        return WindowedDataset(self.X[idx], self.y[idx], self.t[idx], self.scenario_id[idx],
                               self.end_row[idx], self.window_len)


def make_windows(
    features: np.ndarray,
    targets: np.ndarray,
    scenario_id: Optional[np.ndarray] = None,
    t: Optional[np.ndarray] = None,
    window_len: int = 100,
) -> WindowedDataset:
    """Stride-1 windows per scenario; the target is taken at each window's last step."""
    features = np.asarray(features, dtype=float)
    targets = np.asarray(targets, dtype=float)
    if features.ndim == 1:
        features = features[:, None]
    if targets.ndim == 1:
        targets = targets[:, None]
    n = features.shape[0]
    if scenario_id is None:
        scenario_id = np.zeros(n, dtype=int)
    if t is None:
        t = np.arange(n, dtype=float)
    table = ChannelTable(np.asarray(scenario_id), np.asarray(t, dtype=float), features, targets)

    Xs, ends = [], []
    for start, stop in table.scenario_bounds():
        length = stop - start
        if length < window_len:
            raise DatasetError(
                f"scenario {int(table.scenario_id[start])} has {length} rows, "
                f"fewer than window_len={window_len}"
            )
        view = np.lib.stride_tricks.sliding_window_view(features[start:stop], window_len, axis=0)
        Xs.append(view.transpose(0, 2, 1))
        ends.append(np.arange(start + window_len - 1, stop))
    end_row = np.concatenate(ends) if ends else np.zeros(0, dtype=int)
    X = np.concatenate(Xs) if Xs else np.zeros((0, window_len, features.shape[1]))
    return WindowedDataset(
        X=np.ascontiguousarray(X),
        y=targets[end_row],
        t=table.t[end_row],
        scenario_id=table.scenario_id[end_row],
        end_row=end_row,
        window_len=window_len,
    )


@dataclass
class SplitIndices:
    train: range
    test: range
    folds: List[range]
    inner_val_fraction: float = 0.10


def make_splits(n_windows: int, train_frac: float = 0.85, K: int = 5,
                inner_val_fraction: float = 0.10) -> SplitIndices:
    """Chronological train/test split with K contiguous folds over the train range."""
    if n_windows < K:
        raise DatasetError(f"need at least K={K} windows, got {n_windows}")
    n_train = int(math.floor(train_frac * n_windows + 1e-9))
    sizes = np.full(K, n_train // K)
    sizes[: n_train % K] += 1
    edges = np.concatenate([[0], np.cumsum(sizes)])
    folds = [range(int(a), int(b)) for a, b in zip(edges[:-1], edges[1:])]
    return SplitIndices(range(0, n_train), range(n_train, n_windows), folds, inner_val_fraction)


# --------------------------------------------------------------------------- pipeline


class ChannelPreprocessor(TransformerMixin, BaseEstimator):
    """Outlier clipping plus z-scoring of channel rows, fitted on training rows only.

    Parameters
    ----------
    clip_k : float
        Input features are clipped to mean ± clip_k·std (training statistics).
        Targets are ideal ground truth and are only normalized.
    """

    def __init__(self, clip_k: float = 5.0):
        self.clip_k = clip_k

    def fit(self, features, targets):
        fm, fs = normalize_fit(features)
        tm, ts = normalize_fit(targets)
        self.stats_ = NormStats(fm, fs, tm, ts)
        return self

    def transform(self, features):
        s = self.stats_
        clipped = clean_outliers(features, self.clip_k, s.feature_mean, s.feature_std)
        return normalize_apply(clipped, s.feature_mean, s.feature_std)

    def transform_targets(self, targets):
        return normalize_apply(targets, self.stats_.target_mean, self.stats_.target_std)

    def inverse_transform_targets(self, targets):
        return denormalize(targets, self.stats_.target_mean, self.stats_.target_std)


@dataclass
class PreparedData:
    windows: WindowedDataset  # normalized
    splits: SplitIndices
    stats: NormStats
    preprocessor: ChannelPreprocessor

    @property
    def train(self) -> WindowedDataset:
        return self.windows.subset(np.asarray(self.splits.train))

    @property
    def test(self) -> WindowedDataset:
        return self.windows.subset(np.asarray(self.splits.test))


def prepare(table: ChannelTable, window_len: int = 100, train_frac: float = 0.85,
            K: int = 5, clip_k: float = 5.0) -> PreparedData:
    """Window, split chronologically, and normalize with train-only statistics."""
    raw = make_windows(table.features, table.targets, table.scenario_id, table.t, window_len)
    splits = make_splits(len(raw), train_frac, K)
    # rows touched by any training window
    train_rows = np.zeros(len(table), dtype=bool)
    for end in raw.end_row[np.asarray(splits.train)]:
        train_rows[end - window_len + 1: end + 1] = True
    pre = ChannelPreprocessor(clip_k).fit(table.features[train_rows], table.targets[train_rows])
    normed = make_windows(
        pre.transform(table.features),
        pre.transform_targets(table.targets),
        table.scenario_id,
        table.t,
        window_len,
    )
    return PreparedData(normed, splits, pre.stats_, pre)


# --------------------------------------------------------------------------- files


def file_sha256(path: Union[str, Path]) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class DatasetManifest:
    format_version: int
    csv_sha256: str
    n_rows: int
    scenarios: List[dict] = field(default_factory=list)
    plant: dict = field(default_factory=dict)
    disturbance: dict = field(default_factory=dict)

    def save(self, path: Union[str, Path]) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2))

    @classmethod
    def load(cls, path: Union[str, Path]) -> "DatasetManifest":
        return cls(**json.loads(Path(path).read_text()))


def dataset_paths(directory: Union[str, Path]) -> Dict[str, Path]:
    d = Path(directory)
    return {"csv": d / "dataset.csv", "stats": d / "norm_stats.json", "manifest": d / "manifest.json"}


def load_dataset(directory: Union[str, Path]) -> Tuple[ChannelTable, DatasetManifest]:
    """Read the dataset CSV and check it against its manifest."""
    p = dataset_paths(directory)
    if not p["csv"].exists() or not p["manifest"].exists():
        raise FileNotFoundError(f"no dataset found in {directory}")
    manifest = DatasetManifest.load(p["manifest"])
    if manifest.format_version != FORMAT_VERSION:
        raise DatasetError(
            f"dataset format version {manifest.format_version} != supported {FORMAT_VERSION}"
        )
    if file_sha256(p["csv"]) != manifest.csv_sha256:
        raise DatasetError(f"{p['csv']} does not match its manifest checksum")
    table = ChannelTable.from_csv(p["csv"])
    if len(table) != manifest.n_rows:
        raise DatasetError(f"row count {len(table)} != manifest {manifest.n_rows}")
    return table, manifest
