"""Encoder-only time-series transformer with a Negative Binomial output head.

The model is written directly in numpy with an explicit backward pass so
that every gradient can be checked against finite differences.

Token layout for a look-back window ending at ``t`` (forecasting ``t + 1``):
position ``j`` holds the observation ``y[t - V + 1 + j]`` together with the
station-local channels observed at that step, while the global channels and
the "known-ahead" local channels are taken one step later. The last token
therefore carries the calendar, weather and Stage-1 expectation of the
target interval, which is how the known future covariates reach an
encoder-only model.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import nbdist
from .errors import ConfigError, DivergenceError

logger = logging.getLogger(__name__)

EPS_HEAD = 1e-6
LN_EPS = 1e-5
GELU_C = math.sqrt(2.0 / math.pi)
CHECKPOINT_VERSION = 1


@dataclass
class EmbedConfig:
    n_stations: int
    n_static: int
    n_global: int
    n_local: int
    station_dim: int = 8
    global_dim: int = 8
    model_dim: int = 32
    lookback: int = 24
    horizon: int = 1
    n_heads: int = 4
    ffn_dim: int | None = None

    def __post_init__(self):
        if self.horizon != 1:
            raise ConfigError("only one-step-ahead forecasting (horizon 1) is supported")
        if self.model_dim <= 0 or self.lookback < 1:
            raise ConfigError("model_dim must be positive and lookback at least 1")
        if self.model_dim % self.n_heads:
            raise ConfigError(f"model_dim {self.model_dim} is not divisible by {self.n_heads} heads")
        if self.n_global == 0:
            self.global_dim = 0
        if self.ffn_dim is None:
            self.ffn_dim = 2 * self.model_dim

    @property
    def input_dim(self) -> int:
        return self.station_dim + self.global_dim + self.n_local + 1

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.n_heads


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 256
    learning_rate: float = 1e-3
    dropout: float = 0.1
    n_layers: int = 2
    hidden_size: int = 32
    seed: int = 0
    grad_clip: float | None = 5.0
    steps_per_epoch: int | None = None
    frozen: tuple[str, ...] = ()
    strict: bool = False

    def validate(self) -> list[str]:
        """Check hyperparameters against the tuned ranges.

        Out-of-range values produce warnings, or a ConfigError when
        ``strict`` is set.
        """
        issues = []
        if self.n_layers not in (1, 2, 3):
            issues.append(f"n_layers={self.n_layers} outside {{1, 2, 3}}")
        if self.hidden_size not in (16, 32, 64):
            issues.append(f"hidden_size={self.hidden_size} outside {{16, 32, 64}}")
        if self.dropout not in (0.1, 0.2, 0.3):
            issues.append(f"dropout={self.dropout} outside {{0.1, 0.2, 0.3}}")
        if not 5e-5 <= self.learning_rate <= 1e-2:
            issues.append(f"learning_rate={self.learning_rate} outside [5e-5, 1e-2]")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        if not 0 <= self.dropout < 1:
            raise ConfigError("dropout must lie in [0, 1)")
        if issues and self.strict:
            raise ConfigError("; ".join(issues))
        for msg in issues:
            logger.warning("hyperparameter %s", msg)
        return issues


# ---------------------------------------------------------------------------
# primitives


def positional_encoding(position, dim: int) -> np.ndarray:
    """Sinusoidal encoding; ``position`` may be a scalar or an array."""
    pos = np.asarray(position, dtype=np.float64)[..., None]
    j = np.arange(dim) // 2
    angle = pos / np.power(10000.0, 2.0 * j / dim)
    return np.where(np.arange(dim) % 2 == 0, np.sin(angle), np.cos(angle))


def softplus(x):
    return np.logaddexp(0.0, x)


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def softmax(x, axis=-1):
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def _gelu(x):
    t = np.tanh(GELU_C * x * (1.0 + 0.044715 * x * x))
    return 0.5 * x * (1.0 + t), t


def _gelu_grad(x, t):
    return 0.5 * (1.0 + t) + (0.5 * GELU_C) * x * (1.0 - t * t) * (1.0 + 0.134145 * x * x)


def _layer_norm(x, g, b):
    mean = x.mean(axis=-1, keepdims=True)
    xc = x - mean
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + LN_EPS)
    xhat = xc * inv
    return xhat * g + b, (xhat, inv)


def _layer_norm_back(dy, g, cache):
    xhat, inv = cache
    n = xhat.shape[-1]
    dg = (dy * xhat).reshape(-1, n).sum(axis=0)
    db = dy.reshape(-1, n).sum(axis=0)
    dxhat = dy * g
    dx = inv / n * (
        n * dxhat - dxhat.sum(axis=-1, keepdims=True) - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True)
    )
    return dx, dg, db


# ---------------------------------------------------------------------------
# data


@dataclass
class Batch:
    station_rows: np.ndarray  # (B,) model embedding rows; -1 selects the mean embedding
    static: np.ndarray  # (B, k)
    glob: np.ndarray  # (B, V, G)
    local: np.ndarray  # (B, V, P)
    y: np.ndarray  # (B, V)
    target: np.ndarray | None = None  # (B,)

    def __len__(self):
        return len(self.station_rows)


@dataclass
class WindowDataset:
    """Look-back windows over aligned per-station arrays.

    ``windows`` rows are ``(station, t)`` where ``t`` is the last observed
    index; the target is ``y[station, t + 1]``.
    """

    y: np.ndarray  # (S, T)
    glob: np.ndarray  # (T, G), known ahead
    local_past: np.ndarray  # (S, T, Pp)
    local_ahead: np.ndarray  # (S, T, Pa)
    static: np.ndarray  # (S, k)
    station_rows: np.ndarray  # (S,)
    lookback: int
    windows: np.ndarray  # (N, 2)

    def __post_init__(self):
        self.windows = np.asarray(self.windows, dtype=np.int64).reshape(-1, 2)
        if len(self.windows):
            t = self.windows[:, 1]
            if t.min() < self.lookback - 1 or t.max() + 1 >= self.y.shape[1]:
                raise ConfigError("window indices fall outside the series")

    def __len__(self):
        return len(self.windows)

    @property
    def max_target_index(self) -> int:
        return int(self.windows[:, 1].max()) + 1 if len(self.windows) else -1

    def batch(self, idx) -> Batch:
        s = self.windows[idx, 0]
        t = self.windows[idx, 1]
        past = t[:, None] - self.lookback + 1 + np.arange(self.lookback)
        ahead = past + 1
        srow = s[:, None]
        local = np.concatenate([self.local_past[srow, past], self.local_ahead[srow, ahead]], axis=-1)
        return Batch(
            station_rows=self.station_rows[s],
            static=self.static[s],
            glob=self.glob[ahead],
            local=local,
            y=self.y[srow, past].astype(np.float64),
            target=self.y[s, t + 1].astype(np.float64),
        )

    def subset(self, mask) -> "WindowDataset":
        return WindowDataset(
            self.y, self.glob, self.local_past, self.local_ahead, self.static,
            self.station_rows, self.lookback, self.windows[mask],
        )


# ---------------------------------------------------------------------------
# model


@dataclass
class ForwardCache:
    batch: Batch
    x: np.ndarray
    blocks: list = field(default_factory=list)
    last: np.ndarray | None = None
    a_mu: np.ndarray | None = None
    a_r: np.ndarray | None = None
    h_station: np.ndarray | None = None


class TSTModel:
    """Encoder-only transformer mapping a look-back window to NB parameters."""

    def __init__(self, cfg: EmbedConfig, n_layers: int = 2, dropout: float = 0.1, seed: int = 0,
                 station_ids: list[str] | None = None):
        if n_layers < 0:
            raise ConfigError("n_layers must be non-negative")
        self.cfg = cfg
        self.n_layers = n_layers
        self.dropout = dropout
        self.station_ids = list(station_ids) if station_ids is not None else [str(i) for i in range(cfg.n_stations)]
        if len(self.station_ids) != cfg.n_stations:
            raise ConfigError("station id list does not match n_stations")
        self.params = self._init_params(np.random.default_rng(seed))
        self.norm_stats: dict | None = None
        self._pe = positional_encoding(np.arange(cfg.lookback), cfg.model_dim)

    # -- construction ------------------------------------------------------

    def _init_params(self, rng):
        c = self.cfg

        def xavier(fan_in, fan_out):
            lim = math.sqrt(6.0 / (fan_in + fan_out)) if fan_in + fan_out else 0.0
            return rng.uniform(-lim, lim, size=(fan_in, fan_out))

        e, f = c.model_dim, c.ffn_dim
        p = {
            "station_emb": rng.normal(0.0, 0.02, size=(c.n_stations, c.station_dim)),
            "static_w": xavier(c.n_static, c.station_dim),
            "global_w": xavier(c.n_global, c.global_dim),
            "global_b": np.zeros(c.global_dim),
            "proj_w": xavier(c.input_dim, e),
            "proj_b": np.zeros(e),
        }
        for layer in range(self.n_layers):
            pre = f"enc{layer}."
            for name in ("q", "k", "v", "o"):
                p[pre + name + "_w"] = xavier(e, e)
                p[pre + name + "_b"] = np.zeros(e)
            p[pre + "ln1_g"] = np.ones(e)
            p[pre + "ln1_b"] = np.zeros(e)
            p[pre + "ff1_w"] = xavier(e, f)
            p[pre + "ff1_b"] = np.zeros(f)
            p[pre + "ff2_w"] = xavier(f, e)
            p[pre + "ff2_b"] = np.zeros(e)
            p[pre + "ln2_g"] = np.ones(e)
            p[pre + "ln2_b"] = np.zeros(e)
        p["head_mu_w"] = xavier(e, 1)[:, 0]
        p["head_mu_b"] = np.zeros(1)
        p["head_r_w"] = xavier(e, 1)[:, 0]
        p["head_r_b"] = np.zeros(1)
        return p

    def set_head_bias(self, mean_target: float, shape: float = 1.0) -> None:
        """Start the head at a given mean and shape (inverse softplus)."""
        def inv_softplus(v):
            v = max(v - EPS_HEAD, 1e-6)
            return v + math.log(-math.expm1(-v))

        self.params["head_mu_b"][:] = inv_softplus(mean_target)
        self.params["head_r_b"][:] = inv_softplus(shape)

    @property
    def n_params(self) -> int:
        return sum(v.size for v in self.params.values())

    def station_rows(self, ids, zero_shot: bool = False) -> np.ndarray:
        """Embedding rows for station ids; unseen ids map to -1 (mean embedding) under zero-shot."""
        lookup = {s: i for i, s in enumerate(self.station_ids)}
        rows = []
        for sid in ids:
            if sid in lookup:
                rows.append(lookup[sid])
            elif zero_shot:
                rows.append(-1)
            else:
                raise KeyError(f"station {sid!r} was not seen in training; enable zero-shot substitution")
        return np.asarray(rows, dtype=np.int64)

    def mean_embedding(self) -> np.ndarray:
        return self.params["station_emb"].mean(axis=0)

    # -- forward -----------------------------------------------------------

    def embed(self, batch: Batch, cache: ForwardCache | None = None) -> np.ndarray:
        """Contextual embedding ``z`` of every token, before positional encoding."""
        p, c = self.params, self.cfg
        rows = np.asarray(batch.station_rows)
        emb = p["station_emb"]
        h_station = np.where((rows >= 0)[:, None], emb[np.clip(rows, 0, None)], self.mean_embedding())
        if c.n_static:
            h_station = h_station + batch.static @ p["static_w"]
        B, V = batch.y.shape
        parts = [np.broadcast_to(h_station[:, None, :], (B, V, c.station_dim))]
        if c.n_global:
            parts.append(batch.glob @ p["global_w"] + p["global_b"])
        if c.n_local:
            parts.append(batch.local)
        parts.append(batch.y[..., None])
        x = np.concatenate(parts, axis=-1)
        if cache is not None:
            cache.x = x
            cache.h_station = h_station
        return x @ p["proj_w"] + p["proj_b"]

    def _attention(self, h, pre, cache_list, want_maps=False):
        p, c = self.params, self.cfg
        B, V, e = h.shape
        nh, hd = c.n_heads, c.head_dim

        def heads(a):
            return a.reshape(B, V, nh, hd).transpose(0, 2, 1, 3)

        q = heads(h @ p[pre + "q_w"] + p[pre + "q_b"])
        k = heads(h @ p[pre + "k_w"] + p[pre + "k_b"])
        v = heads(h @ p[pre + "v_w"] + p[pre + "v_b"])
        scale = 1.0 / math.sqrt(hd)
        attn = softmax(q @ k.transpose(0, 1, 3, 2) * scale)
        o = (attn @ v).transpose(0, 2, 1, 3).reshape(B, V, e)
        out = o @ p[pre + "o_w"] + p[pre + "o_b"]
        cache_list.append((q, k, v, attn, o, scale))
        return out

    def encoder_forward(self, e_seq: np.ndarray, training: bool = False, rng=None,
                        cache: ForwardCache | None = None, attention_maps: list | None = None) -> np.ndarray:
        p = self.params
        h = e_seq
        for layer in range(self.n_layers):
            pre = f"enc{layer}."
            store = []
            a = self._attention(h, pre, store)
            if attention_maps is not None:
                attention_maps.append(store[0][3])
            m1 = self._dropout_mask(a.shape, training, rng)
            r1 = h + (a * m1 if m1 is not None else a)
            h1, ln1 = _layer_norm(r1, p[pre + "ln1_g"], p[pre + "ln1_b"])
            u = h1 @ p[pre + "ff1_w"] + p[pre + "ff1_b"]
            g, t = _gelu(u)
            ff = g @ p[pre + "ff2_w"] + p[pre + "ff2_b"]
            m2 = self._dropout_mask(ff.shape, training, rng)
            r2 = h1 + (ff * m2 if m2 is not None else ff)
            h2, ln2 = _layer_norm(r2, p[pre + "ln2_g"], p[pre + "ln2_b"])
            if cache is not None:
                cache.blocks.append(dict(h=h, att=store[0], m1=m1, ln1=ln1, h1=h1, u=u, g=g, t=t, m2=m2, ln2=ln2))
            h = h2
        if not np.all(np.isfinite(h)):
            bad = np.argwhere(~np.isfinite(h))[0]
            raise DivergenceError(f"non-finite encoder activation at index {tuple(bad)}")
        return h

    def _dropout_mask(self, shape, training, rng):
        if not training or self.dropout <= 0:
            return None
        return (rng.random(shape) >= self.dropout) / (1.0 - self.dropout)

    def head(self, last: np.ndarray):
        p = self.params
        a_mu = last @ p["head_mu_w"] + p["head_mu_b"][0]
        a_r = last @ p["head_r_w"] + p["head_r_b"][0]
        return softplus(a_mu) + EPS_HEAD, softplus(a_r) + EPS_HEAD, a_mu, a_r

    def forward(self, batch: Batch, training: bool = False, rng=None, keep_cache: bool = False):
        """Return ``(mu, r, cache)`` for a batch; ``cache`` is None unless requested."""
        cache = ForwardCache(batch=batch, x=None) if keep_cache else None
        z = self.embed(batch, cache)
        h = self.encoder_forward(z + self._pe, training=training, rng=rng, cache=cache)
        last = h[:, -1, :]
        mu, r, a_mu, a_r = self.head(last)
        if cache is not None:
            cache.last, cache.a_mu, cache.a_r = last, a_mu, a_r
        return mu, r, cache

    # -- backward ----------------------------------------------------------

    def backward(self, cache: ForwardCache, d_mu: np.ndarray, d_r: np.ndarray) -> dict[str, np.ndarray]:
        """Gradients of a scalar loss given its derivatives wrt ``mu`` and ``r``."""
        p, c = self.params, self.cfg
        grads = {k: np.zeros_like(v) for k, v in p.items()}
        batch = cache.batch
        da_mu = d_mu * sigmoid(cache.a_mu)
        da_r = d_r * sigmoid(cache.a_r)
        grads["head_mu_w"] = cache.last.T @ da_mu
        grads["head_mu_b"] = np.array([da_mu.sum()])
        grads["head_r_w"] = cache.last.T @ da_r
        grads["head_r_b"] = np.array([da_r.sum()])
        B, V = batch.y.shape
        dh = np.zeros((B, V, c.model_dim))
        dh[:, -1, :] = np.outer(da_mu, p["head_mu_w"]) + np.outer(da_r, p["head_r_w"])

        for layer in reversed(range(self.n_layers)):
            pre = f"enc{layer}."
            blk = cache.blocks[layer]
            dr2, grads[pre + "ln2_g"], grads[pre + "ln2_b"] = _layer_norm_back(dh, p[pre + "ln2_g"], blk["ln2"])
            dff = dr2 * blk["m2"] if blk["m2"] is not None else dr2
            dh1 = dr2.copy()
            grads[pre + "ff2_w"] = blk["g"].reshape(-1, c.ffn_dim).T @ dff.reshape(-1, c.model_dim)
            grads[pre + "ff2_b"] = dff.reshape(-1, c.model_dim).sum(axis=0)
            du = (dff @ p[pre + "ff2_w"].T) * _gelu_grad(blk["u"], blk["t"])
            grads[pre + "ff1_w"] = blk["h1"].reshape(-1, c.model_dim).T @ du.reshape(-1, c.ffn_dim)
            grads[pre + "ff1_b"] = du.reshape(-1, c.ffn_dim).sum(axis=0)
            dh1 += du @ p[pre + "ff1_w"].T
            dr1, grads[pre + "ln1_g"], grads[pre + "ln1_b"] = _layer_norm_back(dh1, p[pre + "ln1_g"], blk["ln1"])
            da = dr1 * blk["m1"] if blk["m1"] is not None else dr1
            dh = dr1 + self._attention_back(da, blk, pre, grads)

        # positional encoding is additive, so dz = dh
        dz = dh.reshape(-1, c.model_dim)
        x = cache.x.reshape(-1, c.input_dim)
        grads["proj_w"] = x.T @ dz
        grads["proj_b"] = dz.sum(axis=0)
        dx = (dz @ p["proj_w"].T).reshape(B, V, c.input_dim)
        i0 = c.station_dim
        d_station = dx[..., :i0].sum(axis=1)
        if c.n_static:
            grads["static_w"] = batch.static.T @ d_station
        rows = np.asarray(batch.station_rows)
        known = rows >= 0
        np.add.at(grads["station_emb"], rows[known], d_station[known])
        if (~known).any():
            grads["station_emb"] += d_station[~known].sum(axis=0) / c.n_stations
        if c.n_global:
            dg = dx[..., i0 : i0 + c.global_dim].reshape(-1, c.global_dim)
            grads["global_w"] = batch.glob.reshape(-1, c.n_global).T @ dg
            grads["global_b"] = dg.sum(axis=0)
        return grads

    def _attention_back(self, dout, blk, pre, grads):
        p, c = self.params, self.cfg
        q, k, v, attn, o, scale = blk["att"]
        h = blk["h"]
        B, V, e = dout.shape
        nh, hd = c.n_heads, c.head_dim
        d2 = dout.reshape(-1, e)
        grads[pre + "o_w"] = o.reshape(-1, e).T @ d2
        grads[pre + "o_b"] = d2.sum(axis=0)
        do = (d2 @ p[pre + "o_w"].T).reshape(B, V, nh, hd).transpose(0, 2, 1, 3)
        dattn = do @ v.transpose(0, 1, 3, 2)
        dv = attn.transpose(0, 1, 3, 2) @ do
        ds = attn * (dattn - (dattn * attn).sum(axis=-1, keepdims=True)) * scale
        dq = ds @ k
        dk = ds.transpose(0, 1, 3, 2) @ q

        def merge(a):
            return a.transpose(0, 2, 1, 3).reshape(-1, e)

        h2 = h.reshape(-1, e)
        dh = np.zeros_like(h2)
        for name, d in (("q", dq), ("k", dk), ("v", dv)):
            dm = merge(d)
            grads[pre + name + "_w"] = h2.T @ dm
            grads[pre + name + "_b"] = dm.sum(axis=0)
            dh += dm @ p[pre + name + "_w"].T
        return dh.reshape(B, V, e)

    # -- loss --------------------------------------------------------------

    def loss_and_grad(self, batch: Batch, training: bool = False, rng=None, reduction: str = "mean"):
        mu, r, cache = self.forward(batch, training=training, rng=rng, keep_cache=True)
        k = batch.target
        nll = -nbdist.logpmf(mu, r, k)
        d_mu, d_r = nbdist.nll_grad(mu, r, k)
        if reduction == "mean":
            n = len(k)
            loss, d_mu, d_r = nll.mean(), d_mu / n, d_r / n
        else:
            loss = nll.sum()
        return float(loss), self.backward(cache, d_mu, d_r)

    def nll(self, batch: Batch) -> float:
        """Summed negative log-likelihood of the batch targets (inference mode)."""
        mu, r, _ = self.forward(batch)
        return float(-nbdist.logpmf(mu, r, batch.target).sum())

    def predict_params(self, batch: Batch, chunk: int = 4096):
        mus, rs = [], []
        for lo in range(0, len(batch), chunk):
            sub = _slice_batch(batch, slice(lo, lo + chunk))
            mu, r, _ = self.forward(sub)
            mus.append(mu)
            rs.append(r)
        if not mus:
            return np.zeros(0), np.zeros(0)
        return np.concatenate(mus), np.concatenate(rs)


def _slice_batch(batch: Batch, sl) -> Batch:
    return Batch(
        batch.station_rows[sl], batch.static[sl], batch.glob[sl], batch.local[sl], batch.y[sl],
        None if batch.target is None else batch.target[sl],
    )


def embed_step(model: TSTModel, station_row: int, static, glob, local, y) -> np.ndarray:
    """Embedding ``z`` of a single time step (before positional encoding)."""
    c = model.cfg
    b = Batch(
        station_rows=np.array([station_row]),
        static=np.asarray(static, dtype=np.float64).reshape(1, c.n_static),
        glob=np.asarray(glob, dtype=np.float64).reshape(1, 1, c.n_global),
        local=np.asarray(local, dtype=np.float64).reshape(1, 1, c.n_local),
        y=np.array([[float(y)]]),
    )
    return model.embed(b)[0, 0]


def nb_head(model: TSTModel, hidden: np.ndarray) -> nbdist.NegBinParams:
    mu, r, _, _ = model.head(np.asarray(hidden, dtype=np.float64)[None, :])
    return nbdist.NegBinParams(float(mu[0]), float(r[0]))


# ---------------------------------------------------------------------------
# optimisation


class Adam:
    def __init__(self, params: dict, lr: float, betas=(0.9, 0.999), eps: float = 1e-8, frozen=()):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.frozen = set(frozen)
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict, grads: dict) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for name, g in grads.items():
            if name in self.frozen:
                continue
            m = self.m[name]
            v = self.v[name]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            params[name] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class TrainResult:
    history: list[float]
    steps: int


def _clip(grads, max_norm):
    total = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if max_norm is not None and total > max_norm:
        s = max_norm / total
        for g in grads.values():
            g *= s
    return total


def train(model: TSTModel, dataset: WindowDataset, cfg: TrainConfig, train_end: int | None = None,
          log_every: int = 0) -> TrainResult:
    """Mini-batch Adam on the mean NB negative log-likelihood.

    ``train_end`` (exclusive) guards against windows whose targets reach
    into held-out data.
    """
    cfg.validate()
    if train_end is not None and dataset.max_target_index >= train_end:
        raise AssertionError(
            f"training window targets reach index {dataset.max_target_index} >= train_end {train_end}"
        )
    if len(dataset) == 0:
        raise ConfigError("empty training dataset")
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(model.params, cfg.learning_rate, frozen=cfg.frozen)
    history = []
    steps = 0
    n = len(dataset)
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        if cfg.steps_per_epoch is not None:
            order = order[: cfg.steps_per_epoch * cfg.batch_size]
        total, count = 0.0, 0
        for b, lo in enumerate(range(0, len(order), cfg.batch_size)):
            idx = order[lo : lo + cfg.batch_size]
            batch = dataset.batch(idx)
            loss, grads = model.loss_and_grad(batch, training=True, rng=rng)
            if not math.isfinite(loss):
                raise DivergenceError(f"NLL is {loss} at epoch {epoch}, batch {b}")
            _clip(grads, cfg.grad_clip)
            opt.step(model.params, grads)
            total += loss * len(idx)
            count += len(idx)
            steps += 1
        history.append(total / count)
        if log_every and (epoch + 1) % log_every == 0:
            logger.info("epoch %d mean NLL %.5f", epoch + 1, history[-1])
    return TrainResult(history, steps)


# ---------------------------------------------------------------------------
# forecasts


def percentile_nearest_rank(sorted_samples: np.ndarray, q: float) -> np.ndarray:
    """Nearest-rank percentile along the last axis of pre-sorted samples."""
    n = sorted_samples.shape[-1]
    rank = max(int(math.ceil(q / 100.0 * n)), 1)
    return sorted_samples[..., rank - 1]


@dataclass
class ForecastDistribution:
    params: nbdist.NegBinParams
    samples: np.ndarray
    point: float
    interval: tuple[float, float]

    @classmethod
    def from_samples(cls, params, samples) -> "ForecastDistribution":
        s = np.sort(np.asarray(samples))
        return cls(params, s, float(np.median(s)),
                   (float(percentile_nearest_rank(s, 5)), float(percentile_nearest_rank(s, 95))))


@dataclass
class ForecastBatch:
    """Vectorised forecasts: one row per (station, interval)."""

    mu: np.ndarray
    r: np.ndarray
    samples: np.ndarray  # (B, N), sorted per row
    median: np.ndarray
    p05: np.ndarray
    p95: np.ndarray

    def __len__(self):
        return len(self.mu)

    def item(self, i: int) -> ForecastDistribution:
        return ForecastDistribution(
            nbdist.NegBinParams(float(self.mu[i]), float(self.r[i])), self.samples[i],
            float(self.median[i]), (float(self.p05[i]), float(self.p95[i])),
        )

    def sample_std(self) -> np.ndarray:
        return self.samples.std(axis=1, ddof=1) if self.samples.shape[1] > 1 else np.zeros(len(self))


def draw_forecasts(mu, r, keys, n_samples: int = 100, seed: int = 0) -> ForecastBatch:
    """Sample every forecast from its own generator seeded by ``(seed, *key)``.

    Per-forecast generators keep each forecast's draws independent of every
    other forecast in the batch, which the causality guarantees rely on.
    """
    mu = np.asarray(mu, dtype=np.float64)
    r = np.asarray(r, dtype=np.float64)
    samples = np.empty((len(mu), n_samples), dtype=np.int64)
    for i, key in enumerate(keys):
        rng = np.random.default_rng([seed, *(int(k) for k in key)])
        samples[i] = nbdist.sample_arrays(mu[i], r[i], n_samples, rng)
    samples.sort(axis=1)
    return ForecastBatch(
        mu, r, samples, np.median(samples, axis=1).astype(np.float64),
        percentile_nearest_rank(samples, 5).astype(np.float64),
        percentile_nearest_rank(samples, 95).astype(np.float64),
    )


def predict(model: TSTModel, window: Batch, n_samples: int = 100, seed: int = 0, key=(0, 0)) -> ForecastDistribution:
    """Forecast distribution for a single window."""
    mu, r = model.predict_params(window)
    return draw_forecasts(mu[:1], r[:1], [key], n_samples, seed).item(0)


# ---------------------------------------------------------------------------
# gradient verification


@dataclass
class GradCheckReport:
    passed: bool
    max_rel_error: float
    worst_param: str
    worst_index: tuple
    n_checked: int
    tolerance: float


def gradient_check(model: TSTModel, batch: Batch, tolerance: float = 1e-3, n_checks: int = 60,
                   step: float = 1e-4, seed: int = 0, floor: float = 1e-6,
                   grad_override: Callable[[dict], dict] | None = None) -> GradCheckReport:
    """Compare analytic gradients with central finite differences.

    The step is relative (``step * max(1, |theta|)``). Relative error is
    ``|a - n| / max(|a|, |n|, floor)``; the floor keeps near-zero gradients
    from reporting round-off as error.
    """
    rng = np.random.default_rng(seed)
    _, grads = model.loss_and_grad(batch)
    if grad_override is not None:
        grads = grad_override(grads)
    names = [k for k, v in model.params.items() if v.size]
    picks = [(n, tuple(rng.integers(0, s) for s in model.params[n].shape)) for n in names]
    sizes = np.array([model.params[n].size for n in names], dtype=np.float64)
    while len(picks) < n_checks:
        n = names[rng.choice(len(names), p=sizes / sizes.sum())]
        picks.append((n, tuple(rng.integers(0, s) for s in model.params[n].shape)))
    worst = (0.0, "", ())
    for name, idx in picks:
        arr = model.params[name]
        orig = arr[idx]
        h = step * max(1.0, abs(orig))
        arr[idx] = orig + h
        up = model.loss_and_grad(batch)[0]
        arr[idx] = orig - h
        down = model.loss_and_grad(batch)[0]
        arr[idx] = orig
        numeric = (up - down) / (2 * h)
        analytic = float(grads[name][idx])
        err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)
        if err > worst[0] or not worst[1]:
            worst = (err, name, idx)
    return GradCheckReport(worst[0] < tolerance, worst[0], worst[1], worst[2], len(picks), tolerance)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, model: TSTModel, train_cfg: TrainConfig | None = None, extra: dict | None = None) -> None:
    meta = {
        "version": CHECKPOINT_VERSION,
        "embed": asdict(model.cfg),
        "n_layers": model.n_layers,
        "dropout": model.dropout,
        "station_ids": model.station_ids,
        "train": asdict(train_cfg) if train_cfg is not None else None,
        "extra": extra or {},
    }
    arrays = {f"param/{k}": v for k, v in model.params.items()}
    for k, v in (model.norm_stats or {}).items():
        arrays[f"norm/{k}"] = np.asarray(v)
    arrays["__meta__"] = np.array(json.dumps(meta, sort_keys=True))
    path = Path(path)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path):
    """Return ``(model, train_cfg, extra)`` from a checkpoint file."""
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(str(data["__meta__"]))
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ConfigError(f"unsupported checkpoint version {meta.get('version')}")
        cfg = EmbedConfig(**meta["embed"])
        model = TSTModel(cfg, n_layers=meta["n_layers"], dropout=meta["dropout"], station_ids=meta["station_ids"])
        model.params = {k[len("param/"):]: data[k].copy() for k in data.files if k.startswith("param/")}
        norm = {k[len("norm/"):]: data[k].copy() for k in data.files if k.startswith("norm/")}
        model.norm_stats = norm or None
    train_cfg = None
    if meta["train"] is not None:
        t = dict(meta["train"])
        t["frozen"] = tuple(t.get("frozen", ()))
        train_cfg = TrainConfig(**t)
    return model, train_cfg, meta["extra"]
