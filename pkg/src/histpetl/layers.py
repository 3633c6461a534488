"""Transformer building blocks on top of the tensor core."""

from __future__ import annotations

import math
from typing import Callable, Iterator

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError
from .tensor import Tensor

Hook = Callable[[Tensor], Tensor]


class Parameter(Tensor):
    """A leaf tensor that can be frozen; frozen parameters never get a grad buffer."""

    __slots__ = ()

    def __init__(self, data, trainable: bool = True):
        super().__init__(data, requires_grad=trainable)
        self._op = "param"

    @classmethod
    def zeros(cls, *shape: int) -> "Parameter":
        # skips the validating copy: full-scale audits allocate ~86M entries
        # that are never touched
        p = cls._wrap(np.zeros(shape))
        p.requires_grad = True
        p._op = "param"
        return p

    @property
    def trainable(self) -> bool:
        return self.requires_grad

    @trainable.setter
    def trainable(self, flag: bool) -> None:
        self.requires_grad = bool(flag)
        if not flag:
            self.grad = None


class Module:
    """Container that discovers Parameters and sub-Modules from its attributes.

    Lists of modules are walked with their index as the name component. A module
    reachable under several names (weight sharing) is reported once, under the
    first name encountered in attribute order.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        seen: set[int] = set()
        yield from self._walk(prefix, seen)

    def _walk(self, prefix: str, seen: set[int]):
        if id(self) in seen:
            return
        seen.add(id(self))
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Parameter):
                if id(value) not in seen:
                    seen.add(id(value))
                    yield name, value
            elif isinstance(value, Module):
                yield from value._walk(name + ".", seen)
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item._walk(f"{name}.{i}.", seen)

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def set_trainable(self, flag: bool) -> None:
        for p in self.parameters():
            p.trainable = flag

    def num_parameters(self, trainable_only: bool = False) -> int:
        return sum(p.size for p in self.parameters() if p.trainable or not trainable_only)


def _flatten_rows(x: Tensor) -> tuple[Tensor, tuple[int, ...]]:
    lead = x.shape[:-1]
    return T.reshape(x, (math.prod(lead), x.shape[-1])), lead


class Linear(Module):
    """y = x W^T + b over the trailing axis; leading axes are carried through."""

    def __init__(self, in_features: int, out_features: int):
        self.weight = Parameter.zeros(out_features, in_features)
        self.bias = Parameter.zeros(out_features)

    @property
    def in_features(self) -> int:
        return self.weight.shape[1]

    @property
    def out_features(self) -> int:
        return self.weight.shape[0]

    def __call__(self, x: Tensor) -> Tensor:
        return linear_forward(self, x)


def linear_forward(layer: Linear, x: Tensor) -> Tensor:
    if x.shape[-1] != layer.in_features:
        raise DimensionError(
            f"linear: input extent {x.shape[-1]} does not match in_features {layer.in_features}")
    flat, lead = _flatten_rows(x)
    y = T.matmul(flat, T.transpose(layer.weight))
    y = y + T.broadcast_to(layer.bias, y.shape)
    return T.reshape(y, lead + (layer.out_features,))


def kaiming_uniform_init(layer: Linear, rng: np.random.Generator) -> None:
    """Draw weight and bias from U(-1/sqrt(fan_in), 1/sqrt(fan_in))."""
    bound = 1.0 / math.sqrt(layer.in_features)
    layer.weight.data[...] = rng.uniform(-bound, bound, layer.weight.shape)
    layer.bias.data[...] = rng.uniform(-bound, bound, layer.bias.shape)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gain = Parameter(np.ones(dim))
        self.bias = Parameter.zeros(dim)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.bias, self.eps)


def gelu(x: Tensor) -> Tensor:
    return T.gelu(x)


class MhsaLayer(Module):
    """Bidirectional multi-head self-attention with a fused QKV projection."""

    def __init__(self, dim: int, heads: int):
        if heads <= 0 or dim % heads:
            raise ConfigError(f"heads={heads} must divide model dim {dim}")
        self.qkv = Linear(dim, 3 * dim)
        self.proj = Linear(dim, dim)
        self.heads = heads
        self.dim = dim

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    def init(self, rng: np.random.Generator) -> None:
        kaiming_uniform_init(self.qkv, rng)
        kaiming_uniform_init(self.proj, rng)

    def __call__(self, x, qkv_hook=None, query_delta=None, proj_hook=None):
        return mhsa_forward(self, x, qkv_hook, query_delta, proj_hook)


def mhsa_forward(m: MhsaLayer, x: Tensor, qkv_hook: Hook | None = None,
                 query_delta: Tensor | None = None, proj_hook: Hook | None = None,
                 return_weights: bool = False):
    """softmax(Q K^T / sqrt(head_dim)) V per head, heads concatenated then projected.

    ``qkv_hook`` rewrites the fused QKV output (SSF), ``query_delta`` is added
    to the query slice only (LoRA), ``proj_hook`` rewrites the final projection.
    """
    if x.shape[-1] != m.dim:
        raise DimensionError(f"mhsa: input extent {x.shape[-1]} but layer dim {m.dim}")
    squeeze = x.ndim == 2
    if squeeze:
        x = T.reshape(x, (1,) + x.shape)
    batch, n, d = x.shape
    h, hd = m.heads, m.head_dim

    qkv = m.qkv(x)
    if qkv_hook is not None:
        qkv = qkv_hook(qkv)
    q = qkv[..., :d]
    if query_delta is not None:
        if query_delta.ndim == 2:
            query_delta = T.reshape(query_delta, (1,) + query_delta.shape)
        q = q + query_delta
    k = qkv[..., d:2 * d]
    v = qkv[..., 2 * d:]

    def heads_first(t):
        return T.transpose(T.reshape(t, (batch, n, h, hd)), (0, 2, 1, 3))

    q, k, v = heads_first(q), heads_first(k), heads_first(v)
    scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(hd))
    weights = T.softmax(scores, axis=-1)
    ctx = T.matmul(weights, v)
    ctx = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (batch, n, d))
    out = m.proj(ctx)
    if proj_hook is not None:
        out = proj_hook(out)
    if squeeze:
        out = T.reshape(out, (n, d))
    if return_weights:
        return out, weights
    return out


class FfnLayer(Module):
    """fc2(GELU(fc1(x))) with a fixed 4x expansion."""

    def __init__(self, dim: int):
        self.fc1 = Linear(dim, 4 * dim)
        self.fc2 = Linear(4 * dim, dim)

    def init(self, rng: np.random.Generator) -> None:
        kaiming_uniform_init(self.fc1, rng)
        kaiming_uniform_init(self.fc2, rng)

    def __call__(self, x, fc1_hook=None, fc2_hook=None):
        return ffn_forward(self, x, fc1_hook, fc2_hook)


def ffn_forward(f: FfnLayer, x: Tensor, fc1_hook: Hook | None = None,
                fc2_hook: Hook | None = None) -> Tensor:
    hidden = f.fc1(x)
    if fc1_hook is not None:
        hidden = fc1_hook(hidden)
    out = f.fc2(gelu(hidden))
    if fc2_hook is not None:
        out = fc2_hook(out)
    return out
