"""Fixed-step simulation of a delayed four-channel teleoperator with a wave channel.

The loop wiring lives in :func:`simulate_scenario` (see ``_LOOP_SIGNALS`` and
``_build_loop_matrix``); every block is discretized with the bilinear map and
the per-step algebraic loop created by the feedthrough terms is solved exactly.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import signal as sps
from scipy.integrate import trapezoid


class ImproperTransferError(ValueError):
    """Raised when a block with more zeros than poles is discretized directly."""


class SimulationDiverged(RuntimeError):
    """Raised when a loop signal exceeds the overflow bound."""

    def __init__(self, index: int, name: str, value: float):
        self.index = index
        self.name = name
        self.value = value
        super().__init__(
            f"simulation diverged at step {index}: |{name}| = {abs(value):.3g}"
        )


@dataclass
class RationalTF:
    """Continuous-time transfer function, coefficients in descending powers of s."""

    num: Sequence[float]
    den: Sequence[float]
    name: str = "tf"

    def __post_init__(self):
        self.num = [float(c) for c in np.trim_zeros(np.atleast_1d(self.num), "f")] or [0.0]
        self.den = [float(c) for c in np.trim_zeros(np.atleast_1d(self.den), "f")]
        if not self.den:
            raise ValueError(f"{self.name}: denominator must have a nonzero leading coefficient")

    @classmethod
    def gain(cls, k: float, name: str = "gain") -> "RationalTF":
        return cls([k], [1.0], name=name)

    @property
    def is_proper(self) -> bool:
        return len(self.num) <= len(self.den)

    def inverse(self, name: Optional[str] = None) -> "RationalTF":
        return RationalTF(self.den, self.num, name=name or f"1/({self.name})")

    def __neg__(self) -> "RationalTF":
        return RationalTF([-c for c in self.num], self.den, name=f"-{self.name}")

    def dc_gain(self) -> float:
        return self.num[-1] / self.den[-1] if self.den[-1] != 0 else math.inf

    def to_dict(self) -> dict:
        return {"num": list(self.num), "den": list(self.den), "name": self.name}


class DiscreteFilter:
    """Direct-form II transposed realization of a z-domain rational filter."""

    def __init__(self, b, a, dt: float):
        b = np.asarray(b, dtype=float)
        a = np.asarray(a, dtype=float)
        n = max(len(a), len(b))
        a = np.concatenate([a, np.zeros(n - len(a))])
        b = np.concatenate([np.zeros(n - len(b)), b])
        if a[0] == 0:
            raise ValueError("leading denominator coefficient must be nonzero")
        self.b = b / a[0]
        self.a = a / a[0]
        self.dt = float(dt)
        self.state = np.zeros(n - 1)

    @property
    def feedthrough(self) -> float:
        return self.b[0]

    @property
    def free_response(self) -> float:
        """Output contribution of the stored state for the current step."""
        return self.state[0] if self.state.size else 0.0

    def reset(self) -> None:
        self.state[:] = 0.0

    def step(self, u: float) -> float:
        y = self.b[0] * u + self.free_response
        z = self.state
        n = z.size
        for i in range(n - 1):
            z[i] = z[i + 1] + self.b[i + 1] * u - self.a[i + 1] * y
        if n:
            z[n - 1] = self.b[n] * u - self.a[n] * y
        return y

    def filter(self, u: Sequence[float]) -> np.ndarray:
        return np.array([self.step(x) for x in np.asarray(u, dtype=float)])


def discretize(tf: RationalTF, dt: float) -> DiscreteFilter:
    """Bilinear (Tustin) discretization, s <- (2/dt)(z-1)/(z+1)."""
    if dt <= 0:
        raise ValueError(f"dt must be positive, got {dt}")
    if not tf.is_proper:
        raise ImproperTransferError(
            f"block '{tf.name}' is improper (numerator degree {len(tf.num) - 1} > "
            f"denominator degree {len(tf.den) - 1}); use its inverse"
        )
    bz, az = sps.bilinear(tf.num, tf.den, fs=1.0 / dt)
    return DiscreteFilter(bz, az, dt)


# --------------------------------------------------------------------------- waves


@dataclass(frozen=True)
class WaveParams:
    b: float = 62.1208

    def __post_init__(self):
        if not self.b > 0:
            raise ValueError(f"wave impedance b must be positive, got {self.b}")


def wave_encode(F, v, p: WaveParams):
    """Scattering transform: force/velocity to forward and backward waves."""
    s = math.sqrt(2.0 * p.b)
    F = np.asarray(F, dtype=float)
    v = np.asarray(v, dtype=float)
    return (p.b * v + F) / s, (p.b * v - F) / s


def wave_decode(u, w, p: WaveParams):
    s = math.sqrt(2.0 * p.b)
    u = np.asarray(u, dtype=float)
    w = np.asarray(w, dtype=float)
    return (u - w) * s / 2.0, (u + w) / s


def wave_power(F, v):
    """Power F·v, equal to (u^2 - w^2)/2 for the encoded pair."""
    return np.asarray(F, dtype=float) * np.asarray(v, dtype=float)


# --------------------------------------------------------------------------- disturbances


@dataclass
class DelayProfile:
    base_delay: float
    samples: np.ndarray
    sample_period: float
    seed: Optional[int] = None

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=float)
        if np.any(self.samples < 0):
            raise ValueError("delay samples must be non-negative")

    @classmethod
    def constant(cls, delay: float, duration: float = 1.0) -> "DelayProfile":
        return cls(delay, np.array([float(delay)]), sample_period=max(duration, 1e-12))

    def at(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        idx = np.floor(t / self.sample_period + 1e-9).astype(int)
        return self.samples[np.clip(idx, 0, self.samples.size - 1)]


@dataclass(frozen=True)
class DelayConfig:
    base_delay: float = 0.1
    variance: float = 0.001
    sample_period: float = 2.0
    seed: int = 0
    delay_max: float = 1.0


def generate_delay_profile(cfg: DelayConfig, duration: float) -> DelayProfile:
    """Gaussian jitter around ``base_delay``, redrawn every ``sample_period`` and clamped."""
    if cfg.variance < 0:
        raise ValueError(f"delay variance must be >= 0, got {cfg.variance}")
    if duration <= 0:
        raise ValueError(f"duration must be positive, got {duration}")
    n = int(math.ceil(duration / cfg.sample_period - 1e-9))
    rng = np.random.default_rng(cfg.seed)
    jitter = rng.normal(0.0, math.sqrt(cfg.variance), size=n)
    samples = np.clip(cfg.base_delay + jitter, 0.0, cfg.delay_max)
    return DelayProfile(cfg.base_delay, samples, cfg.sample_period, cfg.seed)


@dataclass(frozen=True)
class NoiseConfig:
    power: float = 1.0
    sample_period: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.power < 0:
            raise ValueError(f"noise power must be >= 0, got {self.power}")
        if not self.sample_period > 0:
            raise ValueError(f"noise sample_period must be positive, got {self.sample_period}")


def generate_noise(cfg: NoiseConfig, duration: float, dt: float) -> np.ndarray:
    """Band-limited white noise: zero-order-held N(0, power/sample_period) draws."""
    if dt > cfg.sample_period + 1e-12:
        raise ValueError("dt must not exceed the noise sample period")
    n = int(round(duration / dt))
    n_held = int(math.ceil(n * dt / cfg.sample_period - 1e-9)) + 1
    rng = np.random.default_rng(cfg.seed)
    held = rng.normal(0.0, math.sqrt(cfg.power / cfg.sample_period), size=n_held)
    idx = np.floor(np.arange(n) * dt / cfg.sample_period + 1e-9).astype(int)
    return held[idx]


def _delay_steps(delay: float, dt: float) -> float:
    d = delay / dt
    r = round(d)
    return float(r) if abs(d - r) < 1e-9 else d


def _interp_weights(k: int, d: float) -> Tuple[int, float]:
    """Base index and fraction for reading sample ``k - d``."""
    pos = k - d
    i0 = math.floor(pos)
    return i0, pos - i0


def apply_variable_delay(x: Sequence[float], profile: DelayProfile, dt: float) -> np.ndarray:
    """out[k] = x(t_k - Td(t_k)) with linear interpolation, zero before t = 0."""
    x = np.asarray(x, dtype=float)
    n = x.size
    td = profile.at(np.arange(n) * dt)
    out = np.zeros(n)
    for k in range(n):
        i0, frac = _interp_weights(k, _delay_steps(td[k], dt))
        if i0 < 0 and not (i0 == -1 and frac > 0):
            continue
        lo = x[i0] if i0 >= 0 else 0.0
        hi = x[i0 + 1] if frac > 0 else 0.0
        out[k] = (1.0 - frac) * lo + frac * hi
    return out


# --------------------------------------------------------------------------- plant


def _tf(num, den, name):
    return RationalTF(num, den, name=name)


@dataclass
class PlantConfig:
    """Transfer functions, gains and timing of the baseline teleoperator."""

    Zm: RationalTF = field(default_factory=lambda: _tf([0.25, 0.8], [1.0], "Zm"))
    Zs: RationalTF = field(default_factory=lambda: _tf([0.25, 0.8], [1.0], "Zs"))
    Cm: RationalTF = field(default_factory=lambda: _tf([0.0449, 1.0], [1.0, 0.0], "Cm"))
    Cs: RationalTF = field(default_factory=lambda: _tf([0.0449, 1.0], [1.0, 0.0], "Cs"))
    C1: RationalTF = field(default_factory=lambda: _tf([1.0, 1.0], [1.0, 0.0], "C1"))
    C4: RationalTF = field(default_factory=lambda: _tf([-1.0, -1.0], [1.0, 0.0], "C4"))
    C2: float = 0.5
    C3: float = 2.1790e-5
    C5: float = -5.8165
    C6: float = 0.0038
    wave: WaveParams = field(default_factory=WaveParams)
    env_stiffness: float = 100.0
    env_damping: float = 5.0
    base_delay: float = 0.1
    dt: float = 0.01
    duration: float = 20.0
    overflow_bound: float = 1e6

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if not self.duration > 0:
            raise ValueError(f"duration must be positive, got {self.duration}")
        if self.base_delay < 0:
            raise ValueError(f"base_delay must be >= 0, got {self.base_delay}")

    @property
    def n_steps(self) -> int:
        return int(round(self.duration / self.dt))

    def environment(self) -> RationalTF:
        # spring-damper acting on slave velocity: (d s + k) / s
        return RationalTF([self.env_damping, self.env_stiffness], [1.0, 0.0], name="Ze")


@dataclass
class Disturbance:
    delay: DelayProfile
    noise_master: NoiseConfig
    noise_slave: NoiseConfig


@dataclass
class ScenarioResult:
    t: np.ndarray
    Fh_star: np.ndarray
    M1: np.ndarray
    N1: np.ndarray
    M2: np.ndarray
    N2: np.ndarray
    Td: np.ndarray
    disturbed: bool = False
    internals: Dict[str, np.ndarray] = field(default_factory=dict, repr=False)

    COLUMNS = ("t", "Fh_star", "M1", "N1", "M2", "N2", "Td", "disturbed")

    def __len__(self) -> int:
        return self.t.size

    def to_csv(self, path: Union[str, Path]) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.COLUMNS)
            flag = int(self.disturbed)
            for row in zip(self.t, self.Fh_star, self.M1, self.N1, self.M2, self.N2, self.Td):
                w.writerow([f"{v:.17g}" for v in row] + [flag])

    @classmethod
    def from_csv(cls, path: Union[str, Path]) -> "ScenarioResult":
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            if tuple(header) != cls.COLUMNS:
                raise ValueError(f"unexpected scenario header {header}")
            rows = [[float(v) for v in r] for r in reader]
        arr = np.array(rows, dtype=float).reshape(-1, len(cls.COLUMNS))
        cols = {name: arr[:, i].copy() for i, name in enumerate(cls.COLUMNS[:-1])}
        disturbed = bool(arr[0, -1]) if arr.size else False
        return cls(disturbed=disturbed, **cols)


# Unknowns solved at every step. Equations are in _build_loop_matrix.
_LOOP_SIGNALS = (
    "f_m", "v_m", "cm", "c1", "M1", "N1", "u_m", "w_m",
    "f_s", "v_s", "cs", "c4", "Fe", "N2", "M2", "u_s", "w_s",
)
_IX = {name: i for i, name in enumerate(_LOOP_SIGNALS)}


class _Loop:
    """Discrete blocks of the four-channel loop.

    Master:  Zm v_m = (1 + C6) Fh - Cm v_m - N1
             M1 = C1 v_m + C3 Fh (+ port noise)
    Slave:   Zs v_s = M2 + C5 Fe - Cs v_s - Fe,  Fe = Ze v_s
             N2 = C2 Fe + C4 v_s (+ port noise)
    Channel: master port takes flow M1/b and returns effort N1,
             slave port takes effort N2 and returns flow M2/b,
             waves u_m -> u_s and w_s -> w_m travel through the delay.
    """

    def __init__(self, cfg: PlantConfig):
        dt = cfg.dt
        self.cfg = cfg
        self.Gm = discretize(cfg.Zm.inverse("1/Zm"), dt)
        self.Gs = discretize(cfg.Zs.inverse("1/Zs"), dt)
        self.Cm = discretize(cfg.Cm, dt)
        self.Cs = discretize(cfg.Cs, dt)
        self.C1 = discretize(cfg.C1, dt)
        self.C4 = discretize(cfg.C4, dt)
        self.Ze = discretize(cfg.environment(), dt)
        self.r = math.sqrt(2.0 * cfg.wave.b)
        self._cache: Dict[Tuple[float, float], np.ndarray] = {}

    def matrix_inverse(self, alpha_f: float, alpha_b: float) -> np.ndarray:
        key = (alpha_f, alpha_b)
        inv = self._cache.get(key)
        if inv is None:
            inv = np.linalg.inv(self._build_loop_matrix(alpha_f, alpha_b))
            if len(self._cache) < 64:
                self._cache[key] = inv
        return inv

    def _build_loop_matrix(self, alpha_f: float, alpha_b: float) -> np.ndarray:
        c = self.cfg
        A = np.zeros((len(_LOOP_SIGNALS), len(_LOOP_SIGNALS)))
        rows = [
            {"v_m": 1, "f_m": -self.Gm.feedthrough},
            {"cm": 1, "v_m": -self.Cm.feedthrough},
            {"c1": 1, "v_m": -self.C1.feedthrough},
            {"M1": 1, "c1": -1},
            {"f_m": 1, "cm": 1, "N1": 1},
            {"N1": 1, "M1": -1, "w_m": self.r},
            {"u_m": self.r, "M1": -1, "N1": -1},
            {"w_m": 1, "w_s": -alpha_b},
            {"u_s": 1, "u_m": -alpha_f},
            {"M2": 1, "N2": 1, "u_s": -self.r},
            {"w_s": self.r, "M2": -1, "N2": 1},
            {"N2": 1, "Fe": -c.C2, "c4": -1},
            {"c4": 1, "v_s": -self.C4.feedthrough},
            {"Fe": 1, "v_s": -self.Ze.feedthrough},
            {"cs": 1, "v_s": -self.Cs.feedthrough},
            {"f_s": 1, "M2": -1, "Fe": 1 - c.C5, "cs": 1},
            {"v_s": 1, "f_s": -self.Gs.feedthrough},
        ]
        for i, row in enumerate(rows):
            for name, coef in row.items():
                A[i, _IX[name]] += coef
        return A

    def rhs(self, fh, noise_m, noise_s, hist_u, hist_w) -> np.ndarray:
        c = self.cfg
        return np.array([
            self.Gm.free_response,
            self.Cm.free_response,
            self.C1.free_response,
            c.C3 * fh + noise_m,
            (1.0 + c.C6) * fh,
            0.0,
            0.0,
            hist_w,
            hist_u,
            0.0,
            0.0,
            noise_s,
            self.C4.free_response,
            self.Ze.free_response,
            self.Cs.free_response,
            0.0,
            self.Gs.free_response,
        ])

    def commit(self, x: np.ndarray) -> None:
        self.Gm.step(x[_IX["f_m"]])
        self.Cm.step(x[_IX["v_m"]])
        self.C1.step(x[_IX["v_m"]])
        self.Gs.step(x[_IX["f_s"]])
        self.Cs.step(x[_IX["v_s"]])
        self.C4.step(x[_IX["v_s"]])
        self.Ze.step(x[_IX["v_s"]])


def _read_delayed(hist: np.ndarray, k: int, d: float) -> Tuple[float, float]:
    """Known part and current-sample weight of hist(t_k - d*dt)."""
    i0, frac = _interp_weights(k, d)
    known = 0.0
    alpha = 0.0
    for idx, wgt in ((i0, 1.0 - frac), (i0 + 1, frac)):
        if wgt == 0.0 or idx < 0:
            continue
        if idx == k:
            alpha += wgt
        else:
            known += wgt * hist[idx]
    return known, alpha


def simulate_scenario(
    cfg: PlantConfig,
    fh_star: Sequence[float],
    disturbance: Optional[Disturbance] = None,
) -> ScenarioResult:
    """Run the closed loop for one operator force profile.

    Ideal runs use the constant ``cfg.base_delay`` and no noise; disturbed runs
    add held Gaussian noise at the M1 and N2 ports and follow the delay profile.
    """
    fh = np.asarray(fh_star, dtype=float)
    n = cfg.n_steps
    if fh.size != n:
        raise ValueError(f"input length {fh.size} != duration/dt = {n}")
    dt = cfg.dt
    t = np.arange(n) * dt

    if disturbance is None:
        td = np.full(n, cfg.base_delay)
        noise_m = np.zeros(n)
        noise_s = np.zeros(n)
    else:
        td = disturbance.delay.at(t)
        noise_m = generate_noise(disturbance.noise_master, cfg.duration, dt)
        noise_s = generate_noise(disturbance.noise_slave, cfg.duration, dt)

    loop = _Loop(cfg)
    out = np.zeros((n, len(_LOOP_SIGNALS)))
    u_m = out[:, _IX["u_m"]]
    w_s = out[:, _IX["w_s"]]
    bound = cfg.overflow_bound
    for k in range(n):
        d = _delay_steps(td[k], dt)
        hist_u, alpha_f = _read_delayed(u_m, k, d)
        hist_w, alpha_b = _read_delayed(w_s, k, d)
        x = loop.matrix_inverse(alpha_f, alpha_b) @ loop.rhs(
            fh[k], noise_m[k], noise_s[k], hist_u, hist_w
        )
        if not np.all(np.abs(x) <= bound):
            j = int(np.argmax(~(np.abs(x) <= bound)))
            raise SimulationDiverged(k, _LOOP_SIGNALS[j], float(x[j]))
        out[k] = x
        loop.commit(x)

    col = {name: out[:, i].copy() for name, i in _IX.items()}
    return ScenarioResult(
        t=t,
        Fh_star=fh.copy(),
        M1=col["M1"],
        N1=col["N1"],
        M2=col["M2"],
        N2=col["N2"],
        Td=td.astype(float),
        disturbed=disturbance is not None,
        internals={k: v for k, v in col.items() if k not in ("M1", "N1", "M2", "N2")},
    )


def channel_energy_balance(res: ScenarioResult, p: WaveParams, cumulative: bool = False):
    """Trapezoidal energy into the master port and out of the slave port (J)."""
    p_in = wave_power(res.N1, np.asarray(res.M1) / p.b)
    p_out = wave_power(res.N2, np.asarray(res.M2) / p.b)
    if len(res) < 2:
        zero = np.zeros(len(res)) if cumulative else 0.0
        return zero, zero
    dt = float(res.t[1] - res.t[0])
    if cumulative:
        e_in = np.concatenate([[0.0], np.cumsum((p_in[1:] + p_in[:-1]) * dt / 2.0)])
        e_out = np.concatenate([[0.0], np.cumsum((p_out[1:] + p_out[:-1]) * dt / 2.0)])
        return e_in, e_out
    return float(trapezoid(p_in, dx=dt)), float(trapezoid(p_out, dx=dt))
