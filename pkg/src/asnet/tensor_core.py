"""Dense float64 kernels used by the model: products, activations, normalization, attention.

Matrices are plain 2-D ``numpy.ndarray`` objects of dtype float64 in C order.
Every function here is pure; nothing mutates its inputs.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

LAYER_NORM_EPS = 1e-5

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)


class ShapeError(ValueError):
    pass


class ConfigError(ValueError):
    pass


def as_matrix(data, rows: int | None = None, cols: int | None = None) -> np.ndarray:
    m = np.array(data, dtype=np.float64, order="C")
    if m.ndim == 1 and rows is not None and cols is not None:
        m = m.reshape(rows, cols)
    if m.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {m.shape}")
    if rows is not None and m.shape[0] != rows or cols is not None and m.shape[1] != cols:
        raise ShapeError(f"expected shape ({rows}, {cols}), got {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError("matrix contains non-finite entries")
    return m


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def sigmoid(x):
    """Logistic function, stable for large |x|. Accepts scalars or arrays."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out if out.ndim else float(out)


def log_sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = -np.logaddexp(0.0, -x)
    return out if out.ndim else float(out)


def softmax_rows(m: np.ndarray) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    if m.size == 0:
        raise ShapeError("softmax of an empty matrix")
    z = m - m.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def layer_norm_rows(m: np.ndarray, gain, bias, eps: float = LAYER_NORM_EPS) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    gain = np.asarray(gain, dtype=np.float64)
    bias = np.asarray(bias, dtype=np.float64)
    if gain.shape != (m.shape[-1],) or bias.shape != (m.shape[-1],):
        raise ShapeError(f"gain/bias shapes {gain.shape}/{bias.shape} do not match width {m.shape[-1]}")
    if eps <= 0:
        raise ConfigError("layer-norm eps must be positive")
    mean = m.mean(axis=-1, keepdims=True)
    centered = m - mean
    var = (centered * centered).mean(axis=-1, keepdims=True)
    return centered / np.sqrt(var + eps) * gain + bias


def relu(m: np.ndarray) -> np.ndarray:
    return np.maximum(m, 0.0)


@dataclass(frozen=True)
class AttentionWeights:
    """Input projections (d x d, applied as ``x @ w + b``) and the output projection."""

    wq: np.ndarray
    bq: np.ndarray
    wk: np.ndarray
    bk: np.ndarray
    wv: np.ndarray
    bv: np.ndarray
    wo: np.ndarray
    bo: np.ndarray


def multi_head_attention(
    q: np.ndarray,
    k: np.ndarray,
    v: np.ndarray,
    weights: AttentionWeights,
    heads: int,
    return_attention: bool = False,
):
    """Scaled dot-product attention over ``heads`` heads.

    Returns the (q.rows x d) output, and with ``return_attention`` also the
    head-averaged attention map of shape (q.rows x k.rows).
    """
    d = q.shape[1]
    if k.shape[1] != d or v.shape[1] != d:
        raise ShapeError(f"query/key/value widths differ: {q.shape}, {k.shape}, {v.shape}")
    if k.shape[0] != v.shape[0]:
        raise ShapeError(f"key and value row counts differ: {k.shape} vs {v.shape}")
    if heads < 1 or d % heads:
        raise ConfigError(f"model width {d} is not divisible by {heads} heads")
    dh = d // heads
    qp = (q @ weights.wq + weights.bq).reshape(q.shape[0], heads, dh).transpose(1, 0, 2)
    kp = (k @ weights.wk + weights.bk).reshape(k.shape[0], heads, dh).transpose(1, 0, 2)
    vp = (v @ weights.wv + weights.bv).reshape(v.shape[0], heads, dh).transpose(1, 0, 2)
    logits = qp @ kp.transpose(0, 2, 1) / np.sqrt(dh)
    attn = softmax_rows(logits)
    ctx = (attn @ vp).transpose(1, 0, 2).reshape(q.shape[0], d)
    out = ctx @ weights.wo + weights.bo
    if return_attention:
        return out, attn.mean(axis=0)
    return out


def _splitmix64(x: np.ndarray) -> np.ndarray:
    z = x + _GOLDEN
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


class RngStream:
    """Counter-based generator: output ``i`` is SplitMix64(seed_hash + i * golden).

    The sequence depends only on ``(seed, counter)`` and uses fixed-width
    unsigned arithmetic, so it is identical on every platform.
    """

    def __init__(self, seed: int, counter: int = 0):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.counter = int(counter) & 0xFFFFFFFFFFFFFFFF
        self._key = _splitmix64(np.array([self.seed], dtype=np.uint64))[0]

    def next_u64(self, n: int) -> np.ndarray:
        idx = np.arange(n, dtype=np.uint64) + np.uint64(self.counter)
        with np.errstate(over="ignore"):
            out = _splitmix64(self._key + idx * _GOLDEN)
        self.counter = (self.counter + n) & 0xFFFFFFFFFFFFFFFF
        return out

    def uniform(self, n: int, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        """``n`` doubles in [low, high) built from the top 53 bits of each draw."""
        u = (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)
        return low + (high - low) * u

    def random(self) -> float:
        return float(self.uniform(1)[0])

    def integers(self, low: int, high: int, n: int | None = None):
        """Integers in [low, high); modulo bias is below 2**-40 for the ranges used here."""
        span = high - low
        if span <= 0:
            raise ValueError(f"empty integer range [{low}, {high})")
        draws = self.next_u64(1 if n is None else n) % np.uint64(span)
        vals = draws.astype(np.int64) + low
        return int(vals[0]) if n is None else vals

    def choice_weighted(self, weights) -> int:
        w = np.asarray(weights, dtype=np.float64)
        cdf = np.cumsum(w)
        return int(min(np.searchsorted(cdf, self.random() * cdf[-1], side="right"), len(w) - 1))

    def permutation(self, n: int) -> list[int]:
        items = list(range(n))
        for i in range(n - 1, 0, -1):
            j = self.integers(0, i + 1)
            items[i], items[j] = items[j], items[i]
        return items
