"""Finite-difference gradient checks over every layer family at toy extents."""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import tensor as T
from .histogram import HistogramLayer
from .layers import FfnLayer, LayerNorm, Linear, MhsaLayer
from .model import EncoderBlock, EncoderModel, ModelConfig
from .petl import Adapter, LoraAdapter, PetlConfig, SsfLayer
from .tensor import Tensor
from .training import cross_entropy

GRAD_TOLERANCE = 1e-5
FAMILIES = ("linear", "layer_norm", "mhsa", "ffn", "adapter", "lora", "ssf",
            "hist_forward", "block", "model_loss")


def _randomize(module, rng: np.random.Generator, scale: float = 0.5) -> None:
    """Overwrite every parameter with N(0, scale^2) so no gradient is trivially zero."""
    for p in module.parameters():
        p.data[...] = rng.normal(0.0, scale, p.shape)
        p.trainable = True


def _weighted_sum(out: Tensor, weights: np.ndarray) -> Tensor:
    # a random linear functional probes every output coordinate
    return T.tsum(T.mul(out, Tensor._wrap(weights)))


def _layer_case(module, forward: Callable[[Tensor], Tensor], x_shape, rng) -> tuple:
    _randomize(module, rng)
    x = Tensor(rng.normal(size=x_shape), requires_grad=True)
    w = rng.normal(size=forward(x).shape)
    return (lambda: _weighted_sum(forward(x), w)), module.parameters() + [x]


def family_case(family: str, seed: int = 0, n: int = 3, dim: int = 8, heads: int = 2, bins: int = 4):
    """Return (objective, params) for one layer family."""
    rng = np.random.default_rng(seed)
    shape = (n, dim)
    if family == "linear":
        m = Linear(dim, 5)
        return _layer_case(m, m, shape, rng)
    if family == "layer_norm":
        m = LayerNorm(dim)
        return _layer_case(m, m, shape, rng)
    if family == "mhsa":
        m = MhsaLayer(dim, heads)
        return _layer_case(m, m, shape, rng)
    if family == "ffn":
        m = FfnLayer(dim)
        return _layer_case(m, m, shape, rng)
    if family == "adapter":
        m = Adapter(dim, rate=2)
        return _layer_case(m, m, shape, rng)
    if family == "lora":
        m = LoraAdapter(dim, rank=2)
        return _layer_case(m, m, shape, rng)
    if family == "ssf":
        m = SsfLayer(dim)
        return _layer_case(m, m, shape, rng)
    if family == "hist_forward":
        m = HistogramLayer(dim, bins)
        return _layer_case(m, m, shape, rng)
    if family == "block":
        b = EncoderBlock(dim, heads, placement="both")
        b.hist = HistogramLayer(dim, bins)
        return _layer_case(b, b, shape, rng)
    if family == "model_loss":
        cfg = ModelConfig(dim=dim, heads=heads, blocks=2, in_features=4, max_len=n, classes=3)
        model = EncoderModel(cfg, PetlConfig(kind="hpt", bins=bins), seed=seed)
        model.set_trainable(True)
        frames = rng.normal(size=(2, n, cfg.in_features))
        labels = np.array([0, 2])
        return (lambda: cross_entropy(model(Tensor._wrap(frames)), labels)), model.parameters()
    raise ValueError(f"unknown layer family {family!r}; expected one of {FAMILIES}")


def run_gradcheck(families=FAMILIES, seed: int = 0, h: float = 1e-5) -> dict[str, float]:
    """Max relative error per family."""
    out = {}
    for family in families:
        f, params = family_case(family, seed)
        out[family] = T.grad_check(f, params, h=h)
    return out
