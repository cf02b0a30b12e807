"""Minimal numpy layers with manual backprop: LSTM, Conv1D, MaxPool1D, Dense, Dropout.

All layers take batch-first arrays. ``forward`` caches what ``backward`` needs;
``backward`` fills ``grads`` (same keys as ``params``) and returns the input gradient.
"""
from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np
from scipy.special import expit

logger = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


def _glorot(rng, fan_in, fan_out, dtype):
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(dtype)


def _orthogonal(rng, n, m, dtype):
    a = rng.normal(size=(max(n, m), min(n, m)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    q = q if n >= m else q.T
    return q[:n, :m].astype(dtype)


class Layer:
    params: Dict[str, np.ndarray]
    grads: Dict[str, np.ndarray]

    def __init__(self):
        self.params = {}
        self.grads = {}

    def forward(self, x, training=False, rng=None):
        raise NotImplementedError

    def backward(self, dout):
        raise NotImplementedError

    def n_params(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def config(self) -> dict:
        return {}


class Dense(Layer):
    def __init__(self, n_in, n_out, rng=None, dtype=np.float64):
        super().__init__()
        self.n_in, self.n_out = n_in, n_out
        rng = rng if rng is not None else np.random.default_rng(0)
        self.params = {"W": _glorot(rng, n_in, n_out, dtype), "b": np.zeros(n_out, dtype)}

    def forward(self, x, training=False, rng=None):
        self._x = x
        return x @ self.params["W"] + self.params["b"]

    def backward(self, dout):
        x = self._x
        self.grads = {
            "W": x.reshape(-1, self.n_in).T @ dout.reshape(-1, self.n_out),
            "b": dout.reshape(-1, self.n_out).sum(axis=0),
        }
        return dout @ self.params["W"].T

    def config(self):
        return {"n_in": self.n_in, "n_out": self.n_out}


class ReLU(Layer):
    def forward(self, x, training=False, rng=None):
        self._mask = x > 0
        return x * self._mask

    def backward(self, dout):
        return dout * self._mask


class Dropout(Layer):
    """Inverted dropout; identity at prediction time."""

    def __init__(self, rate=0.3):
        super().__init__()
        self.rate = rate

    def forward(self, x, training=False, rng=None):
        if not training or self.rate <= 0:
            self._mask = None
            return x
        keep = 1.0 - self.rate
        self._mask = (rng.random(x.shape) < keep).astype(x.dtype) / keep
        return x * self._mask

    def backward(self, dout):
        return dout if self._mask is None else dout * self._mask

    def config(self):
        return {"rate": self.rate}


class Conv1D(Layer):
    """Valid (unpadded) 1-D convolution over the time axis."""

    def __init__(self, n_in, filters, kernel_size, rng=None, dtype=np.float64):
        super().__init__()
        self.n_in, self.filters, self.kernel_size = n_in, filters, kernel_size
        rng = rng if rng is not None else np.random.default_rng(0)
        fan = kernel_size * n_in
        self.params = {
            "W": _glorot(rng, fan, filters, dtype).reshape(kernel_size, n_in, filters),
            "b": np.zeros(filters, dtype),
        }

    def forward(self, x, training=False, rng=None):
        B, T, C = x.shape
        k = self.kernel_size
        if T < k:
            raise ValueError(f"sequence length {T} is shorter than kernel size {k}")
        # (B, T-k+1, C, k) -> (B, T-k+1, k, C)
        cols = np.lib.stride_tricks.sliding_window_view(x, k, axis=1).transpose(0, 1, 3, 2)
        self._cols = cols.reshape(B, T - k + 1, k * C)
        self._xshape = x.shape
        W = self.params["W"].reshape(k * C, self.filters)
        return self._cols @ W + self.params["b"]

    def backward(self, dout):
        B, T, C = self._xshape
        k = self.kernel_size
        Tout = T - k + 1
        W = self.params["W"].reshape(k * C, self.filters)
        self.grads = {
            "W": (self._cols.reshape(-1, k * C).T @ dout.reshape(-1, self.filters)).reshape(
                k, C, self.filters
            ),
            "b": dout.reshape(-1, self.filters).sum(axis=0),
        }
        dcols = (dout @ W.T).reshape(B, Tout, k, C)
        dx = np.zeros(self._xshape, dtype=dout.dtype)
        for j in range(k):
            dx[:, j:j + Tout, :] += dcols[:, :, j, :]
        return dx

    def config(self):
        return {"n_in": self.n_in, "filters": self.filters, "kernel_size": self.kernel_size}


class MaxPool1D(Layer):
    """Non-overlapping max pooling over time; a trailing odd step is dropped."""

    def __init__(self, pool_size=2):
        super().__init__()
        self.pool_size = pool_size

    def forward(self, x, training=False, rng=None):
        B, T, C = x.shape
        p = self.pool_size
        Tout = T // p
        blocks = x[:, : Tout * p, :].reshape(B, Tout, p, C)
        self._arg = blocks.argmax(axis=2)
        self._xshape = x.shape
        return np.take_along_axis(blocks, self._arg[:, :, None, :], axis=2)[:, :, 0, :]

    def backward(self, dout):
        B, T, C = self._xshape
        p = self.pool_size
        Tout = T // p
        dblocks = np.zeros((B, Tout, p, C), dtype=dout.dtype)
        np.put_along_axis(dblocks, self._arg[:, :, None, :], dout[:, :, None, :], axis=2)
        dx = np.zeros(self._xshape, dtype=dout.dtype)
        dx[:, : Tout * p, :] = dblocks.reshape(B, Tout * p, C)
        return dx

    def config(self):
        return {"pool_size": self.pool_size}


class LSTM(Layer):
    """Single-layer LSTM with zero initial state.

    Gate layout along the last axis of the fused weights is (input, forget,
    output, candidate), each ``units`` wide.
    """

    def __init__(self, n_in, units, return_sequences=False, rng=None, dtype=np.float64):
        super().__init__()
        self.n_in, self.units, self.return_sequences = n_in, units, return_sequences
        rng = rng if rng is not None else np.random.default_rng(0)
        H = units
        b = np.zeros(4 * H, dtype)
        b[H:2 * H] = 1.0
        self.params = {
            "Wx": _glorot(rng, n_in, 4 * H, dtype),
            "Wh": _orthogonal(rng, H, 4 * H, dtype),
            "b": b,
        }

    def forward(self, x, training=False, rng=None):
        B, T, _ = x.shape
        H = self.units
        Wh = self.params["Wh"]
        xz = x @ self.params["Wx"] + self.params["b"]
        hs = np.zeros((B, T + 1, H), dtype=x.dtype)
        cs = np.zeros((B, T + 1, H), dtype=x.dtype)
        gates = np.empty((B, T, 4 * H), dtype=x.dtype)
        tanh_c = np.empty((B, T, H), dtype=x.dtype)
        for t in range(T):
            z = xz[:, t] + hs[:, t] @ Wh
            g = gates[:, t]
            g[:, : 3 * H] = expit(z[:, : 3 * H])
            g[:, 3 * H:] = np.tanh(z[:, 3 * H:])
            c = g[:, H:2 * H] * cs[:, t] + g[:, :H] * g[:, 3 * H:]
            cs[:, t + 1] = c
            tc = np.tanh(c)
            tanh_c[:, t] = tc
            hs[:, t + 1] = g[:, 2 * H:3 * H] * tc
        self._cache = (x, hs, cs, gates, tanh_c)
        return hs[:, 1:] if self.return_sequences else hs[:, -1]

    def backward(self, dout):
        x, hs, cs, gates, tanh_c = self._cache
        B, T, D = x.shape
        H = self.units
        Wh = self.params["Wh"]
        if self.return_sequences:
            dhs = dout
        else:
            dhs = None
        dz_all = np.empty((B, T, 4 * H), dtype=x.dtype)
        dh = np.zeros((B, H), dtype=x.dtype) if dhs is not None else dout.copy()
        dc = np.zeros((B, H), dtype=x.dtype)
        for t in range(T - 1, -1, -1):
            if dhs is not None:
                dh = dh + dhs[:, t]
            g = gates[:, t]
            i, f, o, cand = g[:, :H], g[:, H:2 * H], g[:, 2 * H:3 * H], g[:, 3 * H:]
            tc = tanh_c[:, t]
            dc = dc + dh * o * (1.0 - tc * tc)
            dz = dz_all[:, t]
            dz[:, :H] = dc * cand * i * (1.0 - i)
            dz[:, H:2 * H] = dc * cs[:, t] * f * (1.0 - f)
            dz[:, 2 * H:3 * H] = dh * tc * o * (1.0 - o)
            dz[:, 3 * H:] = dc * i * (1.0 - cand * cand)
            dc = dc * f
            dh = dz @ Wh.T
        flat_dz = dz_all.reshape(-1, 4 * H)
        self.grads = {
            "Wx": x.reshape(-1, D).T @ flat_dz,
            "Wh": hs[:, :-1].reshape(-1, H).T @ flat_dz,
            "b": flat_dz.sum(axis=0),
        }
        return dz_all @ self.params["Wx"].T

    def hidden_sequence(self, x):
        """All hidden states h_1..h_T for a batch of sequences."""
        keep = self.return_sequences
        self.return_sequences = True
        try:
            return self.forward(x)
        finally:
            self.return_sequences = keep

    def config(self):
        return {"n_in": self.n_in, "units": self.units, "return_sequences": self.return_sequences}


LAYER_TYPES = {cls.__name__: cls for cls in (Dense, ReLU, Dropout, Conv1D, MaxPool1D, LSTM)}


class Sequential:
    def __init__(self, layers: Sequence[Layer]):
        self.layers = list(layers)

    def forward(self, x, training=False, rng=None):
        for layer in self.layers:
            x = layer.forward(x, training=training, rng=rng)
        return x

    def backward(self, dout):
        for layer in reversed(self.layers):
            dout = layer.backward(dout)
        return dout

    def predict(self, x, batch_size=1024):
        x = np.asarray(x, dtype=self.dtype)
        outs = [self.forward(x[i:i + batch_size]) for i in range(0, len(x), batch_size)]
        return np.concatenate(outs) if outs else np.zeros((0, self.layers[-1].n_out))

    @property
    def dtype(self):
        for layer in self.layers:
            for p in layer.params.values():
                return p.dtype
        return np.float64

    def parameters(self):
        """(layer index, name, array) triples in a fixed order."""
        return [(i, k, layer.params[k]) for i, layer in enumerate(self.layers) for k in sorted(layer.params)]

    def gradients(self):
        return [layer.grads[k] for layer in self.layers for k in sorted(layer.params)]

    def n_params(self) -> int:
        return sum(layer.n_params() for layer in self.layers)

    def spec(self) -> List[dict]:
        return [{"type": type(l).__name__, **l.config()} for l in self.layers]

    @classmethod
    def from_spec(cls, spec: List[dict], dtype=np.float64) -> "Sequential":
        layers = []
        for entry in spec:
            entry = dict(entry)
            kind = LAYER_TYPES[entry.pop("type")]
            if kind in (Dense, Conv1D, LSTM):
                entry["dtype"] = dtype
            layers.append(kind(**entry))
        return cls(layers)


def build_recurrent_net(n_features, n_out, units=64, dropout=0.3, seed=0, dtype=np.float64):
    """LSTM -> dropout -> dense head."""
    rng = np.random.default_rng(seed)
    return Sequential([
        LSTM(n_features, units, rng=rng, dtype=dtype),
        Dropout(dropout),
        Dense(units, n_out, rng=rng, dtype=dtype),
    ])


def build_conv_seq_net(n_features, n_out, filters=64, kernel_size=5, pool_size=2,
                       units=100, dropout=0.3, seed=0, dtype=np.float64):
    """Conv1D -> ReLU -> MaxPool -> LSTM -> dropout -> dense head."""
    rng = np.random.default_rng(seed)
    return Sequential([
        Conv1D(n_features, filters, kernel_size, rng=rng, dtype=dtype),
        ReLU(),
        MaxPool1D(pool_size),
        LSTM(filters, units, rng=rng, dtype=dtype),
        Dropout(dropout),
        Dense(units, n_out, rng=rng, dtype=dtype),
    ])


def lstm_forward(net: Sequential, window) -> np.ndarray:
    """Hidden-state sequence of the first LSTM layer for one window (T, D) or a batch."""
    window = np.asarray(window, dtype=net.dtype)
    single = window.ndim == 2
    x = window[None] if single else window
    for layer in net.layers:
        if isinstance(layer, LSTM):
            h = layer.hidden_sequence(x)
            return h[0] if single else h
        x = layer.forward(x)
    raise ValueError("network has no LSTM layer")


# --------------------------------------------------------------------------- training


class Adam:
    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: Optional[List[np.ndarray]] = None
        self.v: Optional[List[np.ndarray]] = None

    def step(self, params: List[np.ndarray], grads: List[np.ndarray]) -> None:
        if self.m is None:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        corr = math.sqrt(1 - b2 ** self.t) / (1 - b1 ** self.t)
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p -= self.lr * corr * m / (np.sqrt(v) + self.eps)


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    patience: int = 5
    val_fraction: float = 0.10
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    clipnorm: Optional[float] = 5.0
    # windows are highly redundant at stride 1; >1 thins the rows each epoch sees
    sample_stride: int = 1


@dataclass
class TrainHistory:
    train_loss: List[float]
    val_loss: List[float]
    best_epoch: int
    stopped_early: bool


def mse_loss(pred, y):
    diff = pred - y
    return float(np.mean(diff * diff)), 2.0 * diff / diff.size


def train_network(net: Sequential, X, y, cfg: Optional[TrainConfig] = None, seed: int = 0) -> TrainHistory:
    """Mini-batch Adam on squared error with early stopping on a held-out tail.

    The last ``val_fraction`` of the rows (in the order given) is the validation
    set; the best-validation weights are restored at the end.
    """
    cfg = cfg or TrainConfig()
    X = np.asarray(X, dtype=net.dtype)
    y = np.asarray(y, dtype=net.dtype)
    if y.ndim == 1:
        y = y[:, None]
    if len(X) != len(y):
        raise ValueError(f"X has {len(X)} rows but y has {len(y)}")
    rng = np.random.default_rng(seed)

    n = len(X)
    n_val = int(round(cfg.val_fraction * n)) if cfg.val_fraction > 0 and n >= 10 else 0
    Xtr, ytr = X[: n - n_val], y[: n - n_val]
    Xval, yval = X[n - n_val:], y[n - n_val:]
    stride = max(1, int(cfg.sample_stride))

    params = [p for _, _, p in net.parameters()]
    opt = Adam(cfg.learning_rate, cfg.beta1, cfg.beta2)

    def evaluate(Xe, ye):
        return mse_loss(net.predict(Xe), ye)[0] if len(Xe) else math.nan

    history = TrainHistory([], [], -1, False)
    best = math.inf
    best_params = [p.copy() for p in params]
    wait = 0
    initial = evaluate(Xtr, ytr)
    if initial == 0.0:
        history.train_loss.append(0.0)
        return history

    for epoch in range(cfg.epochs):
        offset = int(rng.integers(stride)) if stride > 1 else 0
        rows = np.arange(offset, len(Xtr), stride)
        order = rng.permutation(rows)
        total = 0.0
        for start in range(0, len(order), cfg.batch_size):
            idx = np.sort(order[start:start + cfg.batch_size])
            pred = net.forward(Xtr[idx], training=True, rng=rng)
            loss, dpred = mse_loss(pred, ytr[idx])
            if not math.isfinite(loss):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch}, batch starting {start} "
                    f"(last finite epoch loss {history.train_loss[-1:]})"
                )
            total += loss * len(idx)
            net.backward(dpred)
            grads = net.gradients()
            if cfg.clipnorm:
                norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
                if norm > cfg.clipnorm:
                    grads = [g * (cfg.clipnorm / norm) for g in grads]
            opt.step(params, grads)
        history.train_loss.append(total / max(len(order), 1))
        score = evaluate(Xval, yval) if n_val else history.train_loss[-1]
        history.val_loss.append(score)
        if not math.isfinite(score):
            raise TrainingDiverged(f"non-finite validation loss at epoch {epoch}")
        if score < best:
            best, wait, history.best_epoch = score, 0, epoch
            best_params = [p.copy() for p in params]
        else:
            wait += 1
            if wait >= cfg.patience:
                history.stopped_early = True
                break
        logger.debug("epoch %d train %.5g val %.5g", epoch, history.train_loss[-1], score)

    for p, b in zip(params, best_params):
        p[...] = b
    return history


def clone_network(net: Sequential) -> Sequential:
    return copy.deepcopy(net)
