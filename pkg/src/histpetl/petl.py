"""Parameter-efficient tuning branches and the freezing policy around them."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError, MergeError
from .histogram import HistogramLayer
from .layers import LayerNorm, Linear, Module, Parameter, gelu, kaiming_uniform_init
from .tensor import Tensor

METHOD_KINDS = ("full_finetune", "linear_probe", "adapter", "hpt", "lora", "ssf")
PLACEMENTS = ("parallel_mhsa", "parallel_ffn", "both")
SSF_SITES = ("ln1", "qkv", "proj", "ln2", "fc1", "fc2")
# named shorthands for SSF insertion sets
SSF_PRESETS = {
    "layernorm": ("ln1",),
    "mhsa": ("ln1", "qkv", "proj"),
    "mhsa_ffn": SSF_SITES,
}


@dataclass(frozen=True)
class PetlConfig:
    kind: str = "hpt"
    rate: int = 64
    bins: int = 16
    rank: int = 6
    alpha: float = 1.0
    placement: str = "parallel_mhsa"
    insertions: tuple[str, ...] = SSF_SITES
    shared: bool = True

    def __post_init__(self):
        if isinstance(self.insertions, str):
            object.__setattr__(self, "insertions", SSF_PRESETS.get(self.insertions, (self.insertions,)))
        else:
            object.__setattr__(self, "insertions", tuple(self.insertions))
        self.validate()

    def validate(self, dim: int | None = None) -> None:
        if self.kind not in METHOD_KINDS:
            raise ConfigError(f"unknown method kind {self.kind!r}; expected one of {METHOD_KINDS}")
        if self.kind == "adapter" and self.rate <= 0:
            raise ConfigError(f"adapter reduction rate must be positive, got {self.rate}")
        if self.kind == "lora" and (self.rank <= 0 or self.alpha <= 0):
            raise ConfigError(f"lora needs rank > 0 and alpha > 0, got {self.rank}, {self.alpha}")
        if self.kind == "hpt":
            if self.bins <= 0:
                raise ConfigError(f"bins must be positive, got {self.bins}")
            if self.placement not in PLACEMENTS:
                raise ConfigError(f"placement {self.placement!r} not in {PLACEMENTS}")
            if dim is not None and dim % self.bins:
                raise ConfigError(f"bins={self.bins} must divide dim={dim}")
        if self.kind == "ssf":
            bad = [s for s in self.insertions if s not in SSF_SITES]
            if bad or not self.insertions:
                raise ConfigError(f"ssf insertions must be a non-empty subset of {SSF_SITES}, got {self.insertions}")
            if len(set(self.insertions)) != len(self.insertions):
                raise ConfigError("ssf insertions contain duplicates")

    @property
    def label(self) -> str:
        share = "shared" if self.shared else "nonshared"
        if self.kind == "adapter":
            return f"adapter{self.rate}-{share}"
        if self.kind == "hpt":
            return f"hpt{self.bins}-{self.placement}-{share}"
        if self.kind == "lora":
            return f"lora{self.rank}-{share}"
        if self.kind == "ssf":
            return f"ssf-{'+'.join(self.insertions)}-{share}"
        return self.kind

    def to_dict(self) -> dict:
        return {"kind": self.kind, "rate": self.rate, "bins": self.bins, "rank": self.rank,
                "alpha": self.alpha, "placement": self.placement,
                "insertions": list(self.insertions), "shared": self.shared}


class Adapter(Module):
    """Bottleneck branch up(GELU(down(x))) with a zero-initialised up projection."""

    def __init__(self, dim: int, rate: int):
        if rate <= 0:
            raise ConfigError(f"reduction rate must be positive, got {rate}")
        self.hidden = max(1, dim // rate)
        self.down = Linear(dim, self.hidden)
        self.up = Linear(self.hidden, dim)

    def init(self, rng: np.random.Generator) -> None:
        kaiming_uniform_init(self.down, rng)
        self.up.weight.data[...] = 0.0
        self.up.bias.data[...] = 0.0

    def __call__(self, x: Tensor) -> Tensor:
        return adapter_forward(self, x)


def adapter_forward(a: Adapter, x: Tensor) -> Tensor:
    return a.up(gelu(a.down(x)))


class LoraAdapter(Module):
    """Low-rank query update (alpha / r) * x A^T B^T."""

    def __init__(self, dim: int, rank: int, alpha: float = 1.0):
        if rank <= 0:
            raise ConfigError(f"rank must be positive, got {rank}")
        self.A = Parameter.zeros(rank, dim)
        self.B = Parameter.zeros(dim, rank)
        self.rank = rank
        self.alpha = alpha

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank

    def init(self, rng: np.random.Generator) -> None:
        bound = 1.0 / math.sqrt(self.A.shape[1])
        self.A.data[...] = rng.uniform(-bound, bound, self.A.shape)
        self.B.data[...] = 0.0

    def __call__(self, x: Tensor) -> Tensor:
        return lora_forward(self, x)


def lora_forward(l: LoraAdapter, x: Tensor) -> Tensor:
    """The increment to add to the query projection output."""
    dim = l.A.shape[1]
    if x.shape[-1] != dim:
        raise DimensionError(f"lora: input extent {x.shape[-1]} but adapter dim {dim}")
    lead = x.shape[:-1]
    flat = T.reshape(x, (math.prod(lead), dim))
    low = T.matmul(flat, T.transpose(l.A))
    inc = T.scale(T.matmul(low, T.transpose(l.B)), l.scaling)
    return T.reshape(inc, lead + (dim,))


def lora_merge(l: LoraAdapter, w_q: Tensor) -> Tensor:
    """W_q + (alpha / r) B A, so that x W_merged^T equals the branch forward."""
    dim = l.A.shape[1]
    if w_q.shape != (dim, dim):
        raise DimensionError(f"lora_merge: query weight {w_q.shape}, expected {(dim, dim)}")
    return Tensor(w_q.data + l.scaling * (l.B.data @ l.A.data))


def merge_lora_into_qkv(l: LoraAdapter, qkv: Linear) -> Linear:
    """Fold the update into the query rows of a fused QKV linear."""
    dim = l.A.shape[1]
    if qkv.weight.shape != (3 * dim, dim):
        raise DimensionError(f"fused qkv weight {qkv.weight.shape}, expected {(3 * dim, dim)}")
    out = Linear(dim, 3 * dim)
    out.weight.data[...] = qkv.weight.data
    out.weight.data[:dim] = lora_merge(l, Tensor(qkv.weight.data[:dim])).data
    out.bias.data[...] = qkv.bias.data
    return out


class SsfLayer(Module):
    """Per-feature affine scale * x + shift, identity at init."""

    def __init__(self, dim: int):
        self.scale = Parameter(np.ones(dim))
        self.shift = Parameter.zeros(dim)

    def init(self, rng: np.random.Generator | None = None) -> None:
        self.scale.data[...] = 1.0
        self.shift.data[...] = 0.0

    def __call__(self, x: Tensor) -> Tensor:
        return ssf_apply(self, x)


def ssf_apply(s: SsfLayer, x: Tensor) -> Tensor:
    dim = s.scale.shape[0]
    if x.shape[-1] != dim:
        raise DimensionError(f"ssf: input extent {x.shape[-1]} but layer dim {dim}")
    return T.add(T.mul(x, T.broadcast_to(s.scale, x.shape)), T.broadcast_to(s.shift, x.shape))


def ssf_merge(s: SsfLayer, layer) -> Linear:
    """Fold scale/shift into the Linear it follows: W' = diag(scale) W, b' = scale b + shift."""
    if isinstance(layer, LayerNorm):
        raise MergeError("SSF after a LayerNorm has no preceding Linear to merge into; "
                         "keep it as a separate affine op")
    if not isinstance(layer, Linear):
        raise MergeError(f"SSF can only merge into a Linear, got {type(layer).__name__}")
    dim = s.scale.shape[0]
    if layer.out_features != dim:
        raise DimensionError(f"ssf_merge: ssf dim {dim} but linear produces {layer.out_features}")
    out = Linear(layer.in_features, layer.out_features)
    out.weight.data[...] = s.scale.data[:, None] * layer.weight.data
    out.bias.data[...] = s.scale.data * layer.bias.data + s.shift.data
    return out


def ssf_site_dims(dim: int) -> dict[str, int]:
    return {"ln1": dim, "qkv": 3 * dim, "proj": dim, "ln2": dim, "fc1": 4 * dim, "fc2": dim}


class SsfSet(Module):
    """The SSF layers one block uses, keyed by insertion site."""

    def __init__(self, dim: int, insertions: Iterable[str]):
        dims = ssf_site_dims(dim)
        self.sites = tuple(insertions)
        for site in self.sites:
            setattr(self, site, SsfLayer(dims[site]))

    def init(self, rng: np.random.Generator | None = None) -> None:
        for site in self.sites:
            getattr(self, site).init(rng)

    def layer_for(self, site: str) -> SsfLayer | None:
        return getattr(self, site) if site in self.sites else None


def instantiate_petl(config: PetlConfig, dim: int, num_blocks: int,
                     rng: np.random.Generator | None = None) -> list[Module | None]:
    """One branch module per block; shared configs repeat a single instance."""
    if num_blocks < 1:
        raise ConfigError(f"num_blocks must be >= 1, got {num_blocks}")
    config.validate(dim)
    if config.kind in ("full_finetune", "linear_probe"):
        return [None] * num_blocks

    def build() -> Module:
        if config.kind == "adapter":
            mod = Adapter(dim, config.rate)
        elif config.kind == "hpt":
            mod = HistogramLayer(dim, config.bins)
        elif config.kind == "lora":
            mod = LoraAdapter(dim, config.rank, config.alpha)
        else:
            mod = SsfSet(dim, config.insertions)
        if rng is not None:
            mod.init(rng)
        return mod

    if config.shared:
        mod = build()
        return [mod] * num_blocks
    return [build() for _ in range(num_blocks)]


def expected_branch_params(config: PetlConfig, dim: int, num_blocks: int) -> int:
    """Closed-form trainable count of the PETL branches (head excluded)."""
    if config.kind in ("full_finetune", "linear_probe"):
        return 0
    if config.kind == "adapter":
        h = max(1, dim // config.rate)
        per = 2 * dim * h + h + dim
    elif config.kind == "hpt":
        per = config.bins * dim + 2 * config.bins
    elif config.kind == "lora":
        per = 2 * dim * config.rank
    else:
        dims = ssf_site_dims(dim)
        per = 2 * sum(dims[s] for s in config.insertions)
    return per if config.shared else per * num_blocks


def freeze_base(model, config: PetlConfig) -> None:
    """Set trainable flags: everything, head only, or PETL branches + head."""
    if config.kind == "full_finetune":
        model.set_trainable(True)
        return
    model.set_trainable(False)
    model.head_norm.set_trainable(True)
    model.head.set_trainable(True)
    if config.kind != "linear_probe":
        for mod in model.petl_modules():
            mod.set_trainable(True)
