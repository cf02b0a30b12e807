"""Run configuration: one YAML file with plant / disturbance / dataset /
learners / meta / stability / seeds sections. Unknown or out-of-range fields
raise :class:`ConfigError` naming the field."""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np
import yaml

from .channel_sim import PlantConfig, WaveParams
from .dataset import SIGNAL_KINDS, DisturbanceConfig, ScenarioSpec, SignalSpec
from .learners.hybrids import LEARNER_CLASSES


class ConfigError(ValueError):
    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


def _check(name, value, kind=float, lo=None, hi=None, lo_open=False, hi_open=False):
    if kind is int:
        if isinstance(value, bool) or not isinstance(value, (int, np.integer)):
            raise ConfigError(name, f"expected an integer, got {value!r}")
    elif kind is float:
        if isinstance(value, bool) or not isinstance(value, (int, float, np.number)) or not math.isfinite(value):
            raise ConfigError(name, f"expected a finite number, got {value!r}")
    elif kind is str:
        if not isinstance(value, str):
            raise ConfigError(name, f"expected a string, got {value!r}")
        return value
    rng = f"{'(' if lo_open else '['}{lo if lo is not None else '-inf'}, {hi if hi is not None else 'inf'}{')' if hi_open else ']'}"
    if lo is not None and (value < lo or (lo_open and value == lo)):
        raise ConfigError(name, f"{value} is outside the accepted range {rng}")
    if hi is not None and (value > hi or (hi_open and value == hi)):
        raise ConfigError(name, f"{value} is outside the accepted range {rng}")
    return value


@dataclass
class PlantSection:
    dt: float = 0.01
    base_delay: float = 0.1
    wave_impedance: float = 62.1208
    env_stiffness: float = 100.0
    env_damping: float = 5.0
    C2: float = 0.5
    C3: float = 2.1790e-5
    C5: float = -5.8165
    C6: float = 0.0038
    overflow_bound: float = 1e6

    def validate(self, p="plant"):
        _check(f"{p}.dt", self.dt, lo=0, lo_open=True, hi=1.0)
        _check(f"{p}.base_delay", self.base_delay, lo=0, hi=10)
        _check(f"{p}.wave_impedance", self.wave_impedance, lo=0, lo_open=True)
        _check(f"{p}.env_stiffness", self.env_stiffness, lo=0)
        _check(f"{p}.env_damping", self.env_damping, lo=0)
        for k in ("C2", "C3", "C5", "C6"):
            _check(f"{p}.{k}", getattr(self, k))
        _check(f"{p}.overflow_bound", self.overflow_bound, lo=0, lo_open=True)

    def build(self, duration: float) -> PlantConfig:
        return PlantConfig(
            C2=self.C2, C3=self.C3, C5=self.C5, C6=self.C6, wave=WaveParams(self.wave_impedance),
            env_stiffness=self.env_stiffness, env_damping=self.env_damping, base_delay=self.base_delay,
            dt=self.dt, duration=duration, overflow_bound=self.overflow_bound,
        )


@dataclass
class DisturbanceSection:
    delay_variance: float = 0.001
    delay_sample_period: float = 2.0
    delay_max: float = 1.0
    noise_power: float = 1.0
    noise_sample_period: float = 0.1

    def validate(self, p="disturbance"):
        _check(f"{p}.delay_variance", self.delay_variance, lo=0)
        _check(f"{p}.delay_sample_period", self.delay_sample_period, lo=0, lo_open=True)
        _check(f"{p}.delay_max", self.delay_max, lo=0)
        _check(f"{p}.noise_power", self.noise_power, lo=0)
        _check(f"{p}.noise_sample_period", self.noise_sample_period, lo=0, lo_open=True)

    def build(self, base_delay: float) -> DisturbanceConfig:
        return DisturbanceConfig(base_delay, self.delay_variance, self.delay_sample_period, self.delay_max,
                                 self.noise_power, self.noise_sample_period)


@dataclass
class ScenarioEntry:
    kind: str = "step"
    amplitude: float = 1000.0
    frequency: float = 0.0
    duration: Optional[float] = None
    knots: Optional[List[List[float]]] = None
    seed: Optional[int] = None

    def validate(self, p):
        if self.kind not in SIGNAL_KINDS:
            raise ConfigError(f"{p}.kind", f"{self.kind!r} is not one of {list(SIGNAL_KINDS)}")
        _check(f"{p}.amplitude", self.amplitude)
        _check(f"{p}.frequency", self.frequency, lo=0)
        if self.duration is not None:
            _check(f"{p}.duration", self.duration, lo=0, lo_open=True)
        if self.seed is not None:
            _check(f"{p}.seed", self.seed, int, lo=0)
        if self.knots is not None:
            ts = [k[0] for k in self.knots]
            if len(ts) < 2 or any(b <= a for a, b in zip(ts, ts[1:])):
                raise ConfigError(f"{p}.knots", "need >= 2 knots with strictly increasing t")


@dataclass
class GeneratorSection:
    n_scenarios: int = 21
    duration: float = 10.0
    kinds: List[str] = field(default_factory=lambda: list(SIGNAL_KINDS))
    amplitude: List[float] = field(default_factory=lambda: [500.0, 2000.0])
    frequency: List[float] = field(default_factory=lambda: [0.05, 0.5])

    def validate(self, p="dataset.generator"):
        _check(f"{p}.n_scenarios", self.n_scenarios, int, lo=1)
        _check(f"{p}.duration", self.duration, lo=0, lo_open=True)
        if not self.kinds or any(k not in SIGNAL_KINDS for k in self.kinds):
            raise ConfigError(f"{p}.kinds", f"must be a non-empty list drawn from {list(SIGNAL_KINDS)}")
        for name in ("amplitude", "frequency"):
            v = getattr(self, name)
            if not isinstance(v, list) or len(v) != 2 or v[0] > v[1]:
                raise ConfigError(f"{p}.{name}", f"expected [low, high] with low <= high, got {v!r}")
            for x in v:
                _check(f"{p}.{name}", x, lo=0 if name == "frequency" else None)


@dataclass
class DatasetSection:
    window_len: int = 100
    train_frac: float = 0.85
    K: int = 5
    clip_k: float = 5.0
    scenarios: Optional[List[ScenarioEntry]] = None
    generator: GeneratorSection = field(default_factory=GeneratorSection)

    def validate(self, p="dataset"):
        _check(f"{p}.window_len", self.window_len, int, lo=1)
        _check(f"{p}.train_frac", self.train_frac, lo=0, hi=1, lo_open=True, hi_open=True)
        _check(f"{p}.K", self.K, int, lo=2)
        _check(f"{p}.clip_k", self.clip_k, lo=0, lo_open=True)
        if self.scenarios is not None:
            if not self.scenarios:
                raise ConfigError(f"{p}.scenarios", "list is empty")
            for i, s in enumerate(self.scenarios):
                s.validate(f"{p}.scenarios[{i}]")
        self.generator.validate(f"{p}.generator")


DEFAULT_LEARNERS = ("prophet_lstm", "cnn_lstm", "lstm_km_rf")


@dataclass
class MetaSection:
    n_estimators: int = 200
    learning_rate: float = 0.05
    max_depth: int = 5
    subsample: float = 0.8
    min_samples_leaf: int = 1

    def validate(self, p="meta"):
        _check(f"{p}.n_estimators", self.n_estimators, int, lo=0)
        _check(f"{p}.learning_rate", self.learning_rate, lo=0, lo_open=True, hi=1)
        _check(f"{p}.max_depth", self.max_depth, int, lo=1)
        _check(f"{p}.subsample", self.subsample, lo=0, lo_open=True, hi=1)
        _check(f"{p}.min_samples_leaf", self.min_samples_leaf, int, lo=1)


@dataclass
class StabilitySection:
    pair_budget: int = 100_000
    power_iters: int = 100
    epsilon: float = 1e-5

    def validate(self, p="stability"):
        _check(f"{p}.pair_budget", self.pair_budget, int, lo=1)
        _check(f"{p}.power_iters", self.power_iters, int, lo=1)
        _check(f"{p}.epsilon", self.epsilon, lo=0, lo_open=True)


@dataclass
class SeedsSection:
    data: int = 0
    train: int = 0
    stability: int = 0

    def validate(self, p="seeds"):
        for k in ("data", "train", "stability"):
            _check(f"{p}.{k}", getattr(self, k), int, lo=0)


# learner hyperparameter ranges: name -> (kind, lo, hi, lo_open)
_LEARNER_RULES = {
    "units": (int, 1, None, False), "filters": (int, 1, None, False), "kernel_size": (int, 1, None, False),
    "pool_size": (int, 1, None, False), "dropout": (float, 0, 1, False), "epochs": (int, 1, None, False),
    "batch_size": (int, 1, None, False), "patience": (int, 1, None, False),
    "learning_rate": (float, 0, None, True), "sample_stride": (int, 1, None, False),
    "n_changepoints": (int, 0, None, False), "n_clusters": (int, 1, None, False),
    "n_estimators": (int, 1, None, False), "max_depth": (int, 1, None, False),
    "min_samples_leaf": (int, 1, None, False), "max_features": (float, 0, 1, True), "n_jobs": (int, 1, None, False),
}


def _validate_learner(name: str, params: dict):
    cls = LEARNER_CLASSES[name]
    allowed = set(cls().get_params()) - {"random_state"}
    for key, value in params.items():
        field_name = f"learners.{name}.{key}"
        if key not in allowed:
            raise ConfigError(field_name, f"unknown hyperparameter; accepted: {sorted(allowed)}")
        rule = _LEARNER_RULES.get(key)
        if rule is not None:
            kind, lo, hi, lo_open = rule
            _check(field_name, value, kind, lo=lo, hi=hi, lo_open=lo_open)
    if params.get("seasonality_mode", "multiplicative") not in ("multiplicative", "additive"):
        raise ConfigError(f"learners.{name}.seasonality_mode", "must be 'multiplicative' or 'additive'")
    if params.get("dtype", "float32") not in ("float32", "float64"):
        raise ConfigError(f"learners.{name}.dtype", "must be 'float32' or 'float64'")


@dataclass
class RunConfig:
    plant: PlantSection = field(default_factory=PlantSection)
    disturbance: DisturbanceSection = field(default_factory=DisturbanceSection)
    dataset: DatasetSection = field(default_factory=DatasetSection)
    learners: Dict[str, Dict[str, Any]] = field(default_factory=lambda: {n: {} for n in DEFAULT_LEARNERS})
    meta: MetaSection = field(default_factory=MetaSection)
    stability: StabilitySection = field(default_factory=StabilitySection)
    seeds: SeedsSection = field(default_factory=SeedsSection)
    output_dir: str = "runs/default"
    n_jobs: int = 1

    def validate(self) -> "RunConfig":
        self.plant.validate()
        self.disturbance.validate()
        self.dataset.validate()
        if not self.learners:
            raise ConfigError("learners", "at least one base learner is required")
        for name, params in self.learners.items():
            if name not in LEARNER_CLASSES:
                raise ConfigError(f"learners.{name}", f"unknown learner; accepted: {sorted(LEARNER_CLASSES)}")
            if not isinstance(params, dict):
                raise ConfigError(f"learners.{name}", "expected a mapping of hyperparameters")
            _validate_learner(name, params)
        self.meta.validate()
        self.stability.validate()
        self.seeds.validate()
        _check("n_jobs", self.n_jobs, int, lo=1)
        _check("output_dir", self.output_dir, str)
        return self

    # ------------------------------------------------------------------ io

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: Optional[dict]) -> "RunConfig":
        d = dict(d or {})
        _no_unknown("", d, {f.name for f in dataclasses.fields(cls)})
        ds = dict(d.get("dataset") or {})
        _no_unknown("dataset", ds, {f.name for f in dataclasses.fields(DatasetSection)})
        scen = ds.pop("scenarios", None)
        gen = ds.pop("generator", None)
        dataset = DatasetSection(
            **ds,
            scenarios=None if scen is None else [
                _section(ScenarioEntry, s, f"dataset.scenarios[{i}]") for i, s in enumerate(scen)],
            generator=_section(GeneratorSection, gen, "dataset.generator"),
        )
        learners = d.get("learners")
        if learners is None:
            learners = {n: {} for n in DEFAULT_LEARNERS}
        elif not isinstance(learners, dict):
            raise ConfigError("learners", "expected a mapping of learner name to hyperparameters")
        learners = {k: dict(v or {}) for k, v in learners.items()}
        cfg = cls(
            plant=_section(PlantSection, d.get("plant"), "plant"),
            disturbance=_section(DisturbanceSection, d.get("disturbance"), "disturbance"),
            dataset=dataset,
            learners=learners,
            meta=_section(MetaSection, d.get("meta"), "meta"),
            stability=_section(StabilitySection, d.get("stability"), "stability"),
            seeds=_section(SeedsSection, d.get("seeds"), "seeds"),
            output_dir=d.get("output_dir", "runs/default"),
            n_jobs=d.get("n_jobs", 1),
        )
        return cfg.validate()

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    @classmethod
    def from_yaml(cls, text: str) -> "RunConfig":
        try:
            data = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise ConfigError("<file>", f"not valid YAML: {exc}") from None
        if data is not None and not isinstance(data, dict):
            raise ConfigError("<file>", "top level must be a mapping")
        return cls.from_dict(data)

    def learner_params(self, name: str) -> dict:
        params = dict(self.learners.get(name, {}))
        if "seasonalities" in params:
            params["seasonalities"] = tuple(tuple(s) for s in params["seasonalities"])
        return params


def _no_unknown(prefix, d, allowed):
    if not isinstance(d, dict):
        raise ConfigError(prefix or "<file>", f"expected a mapping, got {type(d).__name__}")
    for key in d:
        if key not in allowed:
            where = f"{prefix}.{key}" if prefix else key
            raise ConfigError(where, f"unknown field; accepted: {sorted(allowed)}")


def _section(cls, d, prefix):
    if d is None:
        return cls()
    _no_unknown(prefix, d, {f.name for f in dataclasses.fields(cls)})
    try:
        return cls(**d)
    except TypeError as exc:
        raise ConfigError(prefix, str(exc)) from None


def load_config(path: Union[str, Path, None] = None) -> RunConfig:
    if path is None:
        return RunConfig().validate()
    p = Path(path)
    if not p.exists():
        raise ConfigError("--config", f"file not found: {p}")
    return RunConfig.from_yaml(p.read_text())


def bundled_config(name: str) -> RunConfig:
    """Configs shipped with the package: ``desk`` or ``smoke``."""
    text = resources.files("wavestack").joinpath("configs", f"{name}.yaml").read_text()
    return RunConfig.from_yaml(text)


# --------------------------------------------------------------------------- scenarios


def build_scenarios(cfg: RunConfig) -> List[Tuple[ScenarioSpec, float]]:
    """Scenario specs with durations; every random draw derives from ``seeds.data``."""
    ds = cfg.dataset
    root = np.random.SeedSequence(cfg.seeds.data)
    out = []
    if ds.scenarios is not None:
        children = root.spawn(len(ds.scenarios))
        for i, (entry, ss) in enumerate(zip(ds.scenarios, children)):
            s = ss.generate_state(4)
            sig = SignalSpec(entry.kind, float(entry.amplitude), float(entry.frequency),
                             [tuple(k) for k in entry.knots] if entry.knots else None,
                             seed=int(entry.seed if entry.seed is not None else s[0]))
            dur = float(entry.duration if entry.duration is not None else ds.generator.duration)
            out.append((ScenarioSpec(sig, int(s[1]), int(s[2]), int(s[3])), dur))
        return out
    g = ds.generator
    for i, ss in enumerate(root.spawn(g.n_scenarios)):
        rng = np.random.default_rng(ss)
        kind = g.kinds[i % len(g.kinds)]
        amp = float(rng.uniform(*g.amplitude))
        freq = float(rng.uniform(*g.frequency))
        s = rng.integers(0, 2**31 - 1, size=4)
        out.append((ScenarioSpec(SignalSpec(kind, amp, freq, seed=int(s[0])), int(s[1]), int(s[2]), int(s[3])),
                    float(g.duration)))
    return out
