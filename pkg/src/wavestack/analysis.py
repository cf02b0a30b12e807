"""Accuracy metrics, Lipschitz estimates, passivity checks and report documents."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.integrate import trapezoid

PAIR_CHUNK = 4096
DEFAULT_PAIR_BUDGET = 100_000


# --------------------------------------------------------------------------- metrics


def _pair(y_true, y_pred):
    y_true = np.asarray(y_true, dtype=np.float64)
    y_pred = np.asarray(y_pred, dtype=np.float64)
    if y_true.shape != y_pred.shape:
        raise ValueError(f"shape mismatch: {y_true.shape} vs {y_pred.shape}")
    if len(y_true) < 2:
        raise ValueError("need at least 2 samples")
    return y_true, y_pred


def mse(y_true, y_pred):
    y_true, y_pred = _pair(y_true, y_pred)
    return np.mean((y_true - y_pred) ** 2, axis=0)


def rmse(y_true, y_pred):
    return np.sqrt(mse(y_true, y_pred))


def mae(y_true, y_pred):
    y_true, y_pred = _pair(y_true, y_pred)
    return np.mean(np.abs(y_true - y_pred), axis=0)


def r2(y_true, y_pred):
    y_true, y_pred = _pair(y_true, y_pred)
    ss_tot = np.sum((y_true - y_true.mean(axis=0)) ** 2, axis=0)
    if np.any(ss_tot == 0):
        raise ValueError("R² is undefined for a constant y_true")
    return 1.0 - np.sum((y_true - y_pred) ** 2, axis=0) / ss_tot


# --------------------------------------------------------------------------- Lipschitz


def _as_fn(model) -> Callable[[np.ndarray], np.ndarray]:
    fn = model.predict if hasattr(model, "predict") else model
    return lambda X: np.asarray(fn(X), dtype=np.float64)


@dataclass
class LipschitzEstimate:
    per_output: List[float]
    L_avg: float
    L_joint: float
    n_pairs: int


def sample_pairs(n: int, pair_budget: int, seed: int) -> Tuple[np.ndarray, np.ndarray]:
    """Index pairs (i, j), i != j, drawn with replacement.

    Draws happen in fixed-size chunks, so a smaller budget yields a prefix of
    the pairs of a larger one under the same seed.
    """
    if n < 2:
        raise ValueError("need at least 2 rows to form pairs")
    rng = np.random.default_rng(seed)
    n_chunks = -(-pair_budget // PAIR_CHUNK)
    I, J = [], []
    for _ in range(n_chunks):
        i = rng.integers(0, n, PAIR_CHUNK)
        r = rng.integers(0, n - 1, PAIR_CHUNK)
        I.append(i)
        J.append((i + 1 + r) % n)
    return np.concatenate(I)[:pair_budget], np.concatenate(J)[:pair_budget]


def estimate_lipschitz_sampling(model, X, pair_budget: int = DEFAULT_PAIR_BUDGET,
                                seed: int = 0) -> LipschitzEstimate:
    """Largest output/input distance ratio over sampled pairs of rows of ``X``.

    ``per_output[d]`` uses the scalar distance of output ``d``; ``L_joint``
    uses the Euclidean distance of the whole output vector. Pairs of identical
    rows are skipped.
    """
    if pair_budget < 1:
        raise ValueError("pair_budget must be >= 1")
    X = np.asarray(X, dtype=np.float64)
    X2 = X.reshape(len(X), -1)
    if len(X2) < 2 or np.all(X2 == X2[0]):
        raise ValueError("X must contain at least 2 distinct rows")
    Y = _as_fn(model)(X)
    Y = Y.reshape(len(X), -1)
    i, j = sample_pairs(len(X2), pair_budget, seed)
    din = np.linalg.norm(X2[i] - X2[j], axis=1)
    keep = din > 0
    din = din[keep]
    dY = Y[i[keep]] - Y[j[keep]]
    if len(din) == 0:
        per, joint = [0.0] * Y.shape[1], 0.0
    else:
        per = [float(v) for v in np.max(np.abs(dY) / din[:, None], axis=0)]
        joint = float(np.max(np.linalg.norm(dY, axis=1) / din))
    return LipschitzEstimate(per, float(np.mean(per)), joint, int(keep.sum()))


@dataclass
class PowerEstimate:
    L: float
    converged: bool
    iterations: int


def finite_difference_jacobian(model, x0, epsilon: float = 1e-5) -> np.ndarray:
    """Central differences, step ``epsilon * max(1, |x0_k|)`` per coordinate."""
    f = _as_fn(model)
    x0 = np.asarray(x0, dtype=np.float64).ravel()
    steps = epsilon * np.maximum(1.0, np.abs(x0))
    plus = x0 + np.diag(steps)
    minus = x0 - np.diag(steps)
    out = f(np.vstack([plus, minus]))
    out = out.reshape(2 * len(x0), -1)
    return ((out[: len(x0)] - out[len(x0):]) / (2.0 * steps[:, None])).T


def estimate_lipschitz_power(model, x0, iters: int = 100, epsilon: float = 1e-5,
                             tol: float = 1e-12, seed: int = 0) -> PowerEstimate:
    """Top singular value of the local Jacobian by power iteration on JᵀJ."""
    J = finite_difference_jacobian(model, x0, epsilon)
    if not np.all(np.isfinite(J)):
        raise ValueError("model output is not finite near x0")
    G = J.T @ J
    v = np.random.default_rng(seed).normal(size=G.shape[0])
    v /= np.linalg.norm(v)
    lam = 0.0
    for k in range(1, iters + 1):
        w = G @ v
        nw = np.linalg.norm(w)
        if nw == 0.0:
            return PowerEstimate(0.0, True, k)
        v = w / nw
        new = float(v @ G @ v)
        if abs(new - lam) <= tol * max(abs(new), 1e-300):
            return PowerEstimate(math.sqrt(max(new, 0.0)), True, k)
        lam = new
    return PowerEstimate(math.sqrt(max(lam, 0.0)), False, iters)


# --------------------------------------------------------------------------- passivity


def passivity_ratio(model, X) -> float:
    """Percent of rows whose prediction norm does not exceed the input-row norm."""
    X = np.asarray(X, dtype=np.float64)
    if len(X) == 0:
        raise ValueError("X is empty")
    Y = _as_fn(model)(X).reshape(len(X), -1)
    n_in = np.linalg.norm(X.reshape(len(X), -1), axis=1)
    n_out = np.linalg.norm(Y, axis=1)
    return 100.0 * float(np.mean(n_out <= n_in))


def integral_passivity_check(u, y, dt: float, tol: float = 1e-9) -> Tuple[float, bool]:
    """Trapezoidal ∫ uᵀy dt; passive when the value is at least ``-tol``."""
    u = np.asarray(u, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if u.shape != y.shape:
        raise ValueError(f"shape mismatch: {u.shape} vs {y.shape}")
    power = u * y if u.ndim == 1 else np.sum(u * y, axis=1)
    value = float(trapezoid(power, dx=dt)) if len(power) > 1 else 0.0
    return value, value >= -tol


# --------------------------------------------------------------------------- reports


METRIC_COLUMNS = ("model", "output", "rmse", "mae", "mse", "r2")


@dataclass
class MetricsReport:
    rows: List[Dict[str, Union[str, float]]] = field(default_factory=list)
    timings: Dict[str, Dict[str, float]] = field(default_factory=dict)
    split: str = "test"
    n_samples: int = 0

    def get(self, model: str, output: str, metric: str) -> float:
        for row in self.rows:
            if row["model"] == model and row["output"] == output:
                return float(row[metric])
        raise KeyError((model, output))

    def models(self) -> List[str]:
        return list(dict.fromkeys(r["model"] for r in self.rows))


@dataclass
class StabilityReport:
    L_per_output: List[float]
    L_avg: float
    passivity_ratio: float
    n_samples: int
    pair_budget: int
    seed: int
    L_joint: float = float("nan")
    L_power: Optional[float] = None
    power_converged: Optional[bool] = None
    outputs: List[str] = field(default_factory=list)
    note: str = ""


def evaluate_predictions(y_true, predictions: Dict[str, np.ndarray], outputs: Sequence[str],
                         split: str = "test") -> MetricsReport:
    y_true = np.asarray(y_true, dtype=np.float64)
    rows = []
    for name, pred in predictions.items():
        vals = {k: f(y_true, pred) for k, f in (("rmse", rmse), ("mae", mae), ("mse", mse), ("r2", r2))}
        for d, out in enumerate(outputs):
            rows.append({"model": name, "output": out, **{k: float(v[d]) for k, v in vals.items()}})
    return MetricsReport(rows, {}, split, len(y_true))


def stability_analysis(model, X_meta, pair_budget: int = DEFAULT_PAIR_BUDGET, seed: int = 0,
                       outputs: Sequence[str] = (), power_iters: int = 100,
                       epsilon: float = 1e-5) -> StabilityReport:
    """Both Lipschitz estimators and the non-expansive ratio on meta-feature rows."""
    X_meta = np.asarray(X_meta, dtype=np.float64)
    est = estimate_lipschitz_sampling(model, X_meta, pair_budget, seed)
    # local estimate at the sample closest to the data centroid
    center = X_meta[np.argmin(np.linalg.norm(X_meta - X_meta.mean(axis=0), axis=1))]
    pw = estimate_lipschitz_power(model, center, power_iters, epsilon, seed=seed)
    return StabilityReport(
        L_per_output=est.per_output,
        L_avg=est.L_avg,
        passivity_ratio=passivity_ratio(model, X_meta),
        n_samples=len(X_meta),
        pair_budget=pair_budget,
        seed=seed,
        L_joint=est.L_joint,
        L_power=pw.L,
        power_converged=pw.converged,
        outputs=list(outputs) or [f"y{d}" for d in range(len(est.per_output))],
    )


@dataclass
class Report:
    metrics: Optional[MetricsReport] = None
    stability: Optional[StabilityReport] = None
    timings: Dict[str, Dict[str, float]] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "metrics": asdict(self.metrics) if self.metrics else None,
            "stability": asdict(self.stability) if self.stability else None,
            "timings": self.timings,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Report":
        return cls(
            MetricsReport(**d["metrics"]) if d.get("metrics") else None,
            StabilityReport(**d["stability"]) if d.get("stability") else None,
            d.get("timings", {}),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "Report":
        return cls.from_dict(json.loads(text))

    def metrics_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for row in (self.metrics.rows if self.metrics else []):
            w.writerow([row["model"], row["output"]] + [repr(float(row[k])) for k in METRIC_COLUMNS[2:]])
        return buf.getvalue()

    def stability_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("quantity", "value"))
        s = self.stability
        if s is not None:
            for out, L in zip(s.outputs, s.L_per_output):
                w.writerow((f"L_{out}", repr(L)))
            for key in ("L_avg", "L_joint", "L_power", "passivity_ratio", "n_samples", "pair_budget", "seed"):
                w.writerow((key, repr(getattr(s, key))))
        return buf.getvalue()

    def timings_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("model", "train_s", "inference_s"))
        for name, t in self.timings.items():
            w.writerow((name, repr(t.get("train_s", float("nan"))), repr(t.get("inference_s", float("nan")))))
        return buf.getvalue()

    def to_text(self) -> str:
        lines = []
        if self.metrics:
            lines.append(f"Accuracy ({self.metrics.split} split, n={self.metrics.n_samples})")
            lines.append(f"{'model':<14}{'output':<10}{'RMSE':>12}{'MAE':>12}{'MSE':>12}{'R2 %':>10}")
            for r in self.metrics.rows:
                lines.append(f"{r['model']:<14}{r['output']:<10}{r['rmse']:>12.5g}{r['mae']:>12.5g}"
                             f"{r['mse']:>12.5g}{100 * r['r2']:>10.3f}")
        if self.timings:
            lines.append("")
            lines.append(f"{'model':<14}{'train s':>12}{'inference s':>14}")
            for name, t in self.timings.items():
                lines.append(f"{name:<14}{t.get('train_s', float('nan')):>12.2f}"
                             f"{t.get('inference_s', float('nan')):>14.3f}")
        if self.stability:
            s = self.stability
            lines.append("")
            lines.append("Stability")
            for out, L in zip(s.outputs, s.L_per_output):
                lines.append(f"  Lipschitz ({out}): {L:.4f}")
            lines.append(f"  Avg. Lipschitz L: {s.L_avg:.4f}")
            lines.append(f"  Joint Lipschitz: {s.L_joint:.4f}")
            if s.L_power is not None:
                lines.append(f"  Local power-iteration L: {s.L_power:.4g} (converged={s.power_converged})")
            lines.append(f"  Passivity ratio: {s.passivity_ratio:.2f}% of {s.n_samples} samples")
            lines.append(f"  Pairs sampled: {s.pair_budget}, seed {s.seed}")
            if s.note:
                lines.append(f"  Note: {s.note}")
        return "\n".join(lines) + "\n"

    def write(self, directory: Union[str, Path], stem: str = "report") -> Dict[str, Path]:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        paths = {"json": d / f"{stem}.json", "text": d / f"{stem}.txt"}
        paths["json"].write_text(self.to_json())
        paths["text"].write_text(self.to_text())
        if self.metrics:
            paths["metrics_csv"] = d / f"{stem}_metrics.csv"
            paths["metrics_csv"].write_text(self.metrics_csv())
        if self.stability:
            paths["stability_csv"] = d / f"{stem}_stability.csv"
            paths["stability_csv"].write_text(self.stability_csv())
        if self.timings:
            paths["timings_csv"] = d / f"{stem}_timings.csv"
            paths["timings_csv"].write_text(self.timings_csv())
        return paths


def build_report(metrics: Optional[MetricsReport] = None, stability: Optional[StabilityReport] = None,
                 timings: Optional[Dict[str, Dict[str, float]]] = None) -> Report:
    if metrics is not None and timings:
        metrics.timings = dict(timings)
    return Report(metrics, stability, dict(timings or {}))
