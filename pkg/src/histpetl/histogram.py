"""Soft 1-D histogram layer: RBF bin memberships pooled into a sequence summary.

Pipeline for an input X of shape (N, D), or (M, N, D) for a batch:

    v = X W^T                              (project onto B bins)
    y = exp(-widths^2 * (v - centers)^2)   (RBF membership, in (0, 1])
    r = y / (sum_b y + eps)                (normalise across bins)
    s = pool(r)                            (adaptive average pool, N -> L per bin)
    H = broadcast(flatten_bin_major(s))    (the same D-vector on every row)

with L = D / B, so the flattened summary has exactly D entries and can join
the residual stream.
"""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError
from .layers import Module, Parameter
from .tensor import Tensor

DEFAULT_EPS = 1e-6


def adaptive_pool_matrix(n: int, length: int) -> np.ndarray:
    """(length, n) averaging matrix with windows [floor(l n/L), ceil((l+1) n/L))."""
    if n < 1 or length < 1:
        raise DimensionError(f"adaptive pooling needs n >= 1 and length >= 1, got {n}, {length}")
    mat = np.zeros((length, n))
    for seg in range(length):
        lo = (seg * n) // length
        hi = -((-(seg + 1) * n) // length)
        mat[seg, lo:hi] = 1.0 / (hi - lo)
    return mat


class HistogramLayer(Module):
    def __init__(self, dim: int, bins: int, eps: float = DEFAULT_EPS):
        if bins < 1 or dim % bins:
            raise ConfigError(f"bins={bins} must be a positive divisor of dim={dim}")
        if eps <= 0:
            raise ConfigError("eps must be positive")
        self.proj = Parameter.zeros(bins, dim)
        self.centers = Parameter.zeros(bins)
        self.widths = Parameter(np.ones(bins))
        self.dim = dim
        self.bins = bins
        self.eps = eps

    @property
    def pool_len(self) -> int:
        return self.dim // self.bins

    def init(self, rng: np.random.Generator) -> None:
        hist_init(self, rng)

    def project(self, x: Tensor) -> Tensor:
        return hist_project(self, x)

    def rbf(self, v: Tensor) -> Tensor:
        return hist_rbf(self, v)

    def normalize(self, y: Tensor) -> Tensor:
        return hist_normalize(self, y)

    def pool_broadcast(self, r: Tensor) -> Tensor:
        return hist_pool_broadcast(self, r)

    def __call__(self, x: Tensor) -> Tensor:
        return hist_forward(self, x)


def hist_init(h: HistogramLayer, rng: np.random.Generator) -> None:
    """Kaiming-uniform defaults of the two 1x1 convolutions.

    The projection and its bias (the centers) have fan_in D; the grouped width
    convolution has fan_in 1, hence U(-1, 1).
    """
    bound = 1.0 / math.sqrt(h.dim)
    h.proj.data[...] = rng.uniform(-bound, bound, h.proj.shape)
    h.centers.data[...] = rng.uniform(-bound, bound, h.centers.shape)
    h.widths.data[...] = rng.uniform(-1.0, 1.0, h.widths.shape)


def hist_project(h: HistogramLayer, x: Tensor) -> Tensor:
    if x.shape[-1] != h.dim:
        raise DimensionError(f"histogram: input extent {x.shape[-1]} but layer dim {h.dim}")
    lead = x.shape[:-1]
    flat = T.reshape(x, (math.prod(lead), h.dim))
    v = T.matmul(flat, T.transpose(h.proj))
    return T.reshape(v, lead + (h.bins,))


def hist_rbf(h: HistogramLayer, v: Tensor) -> Tensor:
    centers = T.broadcast_to(h.centers, v.shape)
    width_sq = T.broadcast_to(T.square(h.widths), v.shape)
    return T.exp(T.neg(T.mul(width_sq, T.square(T.sub(v, centers)))))


def hist_normalize(h: HistogramLayer, y: Tensor) -> Tensor:
    total = T.add(T.tsum(y, axis=-1, keepdims=True), h.eps)
    return T.div(y, T.broadcast_to(total, y.shape))


def hist_pool_broadcast(h: HistogramLayer, r: Tensor) -> Tensor:
    squeeze = r.ndim == 2
    if squeeze:
        r = T.reshape(r, (1,) + r.shape)
    batch, n, bins = r.shape
    pool = Tensor._wrap(adaptive_pool_matrix(n, h.pool_len).T)
    # bin-major rows so the pooled (bins, L) block flattens channel by channel
    per_bin = T.reshape(T.transpose(r, (0, 2, 1)), (batch * bins, n))
    summary = T.reshape(T.matmul(per_bin, pool), (batch, 1, h.dim))
    out = T.broadcast_to(summary, (batch, n, h.dim))
    if squeeze:
        out = T.reshape(out, (n, h.dim))
    return out


def hist_forward(h: HistogramLayer, x: Tensor) -> Tensor:
    return hist_pool_broadcast(h, hist_normalize(h, hist_rbf(h, hist_project(h, x))))
