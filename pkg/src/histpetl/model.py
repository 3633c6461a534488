"""Pre-norm transformer encoder with pluggable PETL branches."""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import asdict, dataclass
from functools import partial

import numpy as np

from . import tensor as T
from .errors import CompatibilityError, ConfigError, DimensionError, FormatError
from .layers import FfnLayer, LayerNorm, Linear, MhsaLayer, Module, Parameter, kaiming_uniform_init
from .petl import PetlConfig, SsfSet, freeze_base, instantiate_petl
from .tensor import Tensor

BRANCH_ATTR = {"adapter": "adapter", "hpt": "hist", "lora": "lora", "ssf": "ssf"}


@dataclass(frozen=True)
class ModelConfig:
    dim: int = 64
    heads: int = 4
    blocks: int = 4
    in_features: int = 16
    max_len: int = 32
    classes: int = 4
    pos_std: float = 0.02

    def __post_init__(self):
        if min(self.dim, self.heads, self.blocks, self.in_features, self.max_len) < 1:
            raise ConfigError(f"model extents must be positive: {self}")
        if self.dim % self.heads:
            raise ConfigError(f"heads={self.heads} must divide dim={self.dim}")
        if self.classes < 2:
            raise ConfigError(f"need at least two classes, got {self.classes}")

    def to_dict(self) -> dict:
        return asdict(self)


class EncoderBlock(Module):
    def __init__(self, dim: int, heads: int, placement: str = "parallel_mhsa"):
        self.ln1 = LayerNorm(dim)
        self.mhsa = MhsaLayer(dim, heads)
        self.ln2 = LayerNorm(dim)
        self.ffn = FfnLayer(dim)
        self.placement = placement
        self.adapter = None
        self.hist = None
        self.lora = None
        self.ssf = None

    def init(self, rng: np.random.Generator) -> None:
        self.mhsa.init(rng)
        self.ffn.init(rng)

    def __call__(self, x: Tensor) -> Tensor:
        return block_forward(self, x)


def _ssf_hook(ssf: SsfSet | None, site: str):
    return ssf.layer_for(site) if ssf is not None else None


def block_forward(b: EncoderBlock, x: Tensor) -> Tensor:
    """Z = X + MHSA(LN1 X) [+ branch(LN1 X)];  out = Z + FFN(LN2 Z) [+ H(LN2 Z)]."""
    hook = partial(_ssf_hook, b.ssf)
    ln1 = hook("ln1")
    x_ln = b.ln1(x)
    if ln1 is not None:
        x_ln = ln1(x_ln)
    delta = b.lora(x_ln) if b.lora is not None else None
    z = x + b.mhsa(x_ln, qkv_hook=hook("qkv"), query_delta=delta, proj_hook=hook("proj"))
    if b.adapter is not None:
        z = z + b.adapter(x_ln)
    if b.hist is not None and b.placement in ("parallel_mhsa", "both"):
        z = z + b.hist(x_ln)

    ln2 = hook("ln2")
    z_ln = b.ln2(z)
    if ln2 is not None:
        z_ln = ln2(z_ln)
    out = z + b.ffn(z_ln, fc1_hook=hook("fc1"), fc2_hook=hook("fc2"))
    if b.hist is not None and b.placement in ("parallel_ffn", "both"):
        out = out + b.hist(z_ln)
    return out


class EncoderModel(Module):
    """Frame projection + positional table, encoder blocks, LN + mean-pool + linear head.

    With ``seed=None`` parameters stay zero-filled and untouched, which keeps
    full-scale parameter audits cheap.
    """

    def __init__(self, config: ModelConfig, petl: PetlConfig | None = None,
                 seed: int | None = None):
        petl = petl or PetlConfig(kind="linear_probe")
        petl.validate(config.dim)
        self.config = config
        self.petl = petl
        d = config.dim
        if seed is None:
            rngs = [None, None, None]
        else:
            rngs = [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(3)]
        backbone_rng, petl_rng, head_rng = rngs

        self.input_proj = Linear(config.in_features, d)
        self.pos_embed = Parameter.zeros(config.max_len, d)
        branches = instantiate_petl(petl, d, config.blocks, petl_rng)
        attr = BRANCH_ATTR.get(petl.kind)
        if attr is not None and petl.shared:
            # registered before the blocks so the shared copy is named at top level
            setattr(self, attr, branches[0])
        self.blocks = [EncoderBlock(d, config.heads, petl.placement) for _ in range(config.blocks)]
        for block, branch in zip(self.blocks, branches):
            if attr is not None:
                setattr(block, attr, branch)
        self.head_norm = LayerNorm(d)
        self.head = Linear(d, config.classes)

        if backbone_rng is not None:
            kaiming_uniform_init(self.input_proj, backbone_rng)
            self.pos_embed.data[...] = backbone_rng.normal(0.0, config.pos_std, self.pos_embed.shape)
            for block in self.blocks:
                block.init(backbone_rng)
            kaiming_uniform_init(self.head, head_rng)
        freeze_base(self, petl)

    def petl_modules(self) -> list[Module]:
        attr = BRANCH_ATTR.get(self.petl.kind)
        if attr is None:
            return []
        seen, mods = set(), []
        for block in self.blocks:
            mod = getattr(block, attr)
            if mod is not None and id(mod) not in seen:
                seen.add(id(mod))
                mods.append(mod)
        return mods

    def __call__(self, frames, capture: bool = False):
        return model_forward(self, frames, capture)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        if set(own) != set(state):
            missing = sorted(set(own) - set(state))
            extra = sorted(set(state) - set(own))
            raise CompatibilityError(f"parameter names differ: missing {missing[:5]}, unexpected {extra[:5]}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise CompatibilityError(f"{name}: checkpoint shape {arr.shape} vs model {p.shape}")
            p.data[...] = arr


def embed(m: EncoderModel, frames: Tensor) -> Tensor:
    """Project frames and add positional rows 0..N-1; returns (M, N, D)."""
    frames = T.as_tensor(frames)
    if frames.ndim == 2:
        frames = T.reshape(frames, (1,) + frames.shape)
    if frames.ndim != 3 or frames.shape[-1] != m.config.in_features:
        raise DimensionError(
            f"frames must be (N, {m.config.in_features}) or (M, N, {m.config.in_features}), got {frames.shape}")
    batch, n, _ = frames.shape
    if n > m.config.max_len:
        raise DimensionError(f"sequence length {n} exceeds max_len {m.config.max_len}")
    x = m.input_proj(frames)
    pos = T.reshape(m.pos_embed[:n], (1, n, m.config.dim))
    return x + T.broadcast_to(pos, x.shape)


def model_forward(m: EncoderModel, frames, capture: bool = False):
    """Logits of shape (C,) for one (N, F) sequence or (M, C) for a batch.

    With ``capture=True`` also returns each block's post-residual output.
    """
    frames = T.as_tensor(frames)
    single = frames.ndim == 2
    x = embed(m, frames)
    feats = []
    for block in m.blocks:
        x = block(x)
        if capture:
            feats.append(T.reshape(x, x.shape[1:]) if single else x)
    logits = head_forward(m, x)
    if single:
        logits = T.reshape(logits, (m.config.classes,))
    return (logits, feats) if capture else logits


def head_forward(m: EncoderModel, x: Tensor) -> Tensor:
    """Final LayerNorm, mean over tokens, linear head: (M, N, D) -> (M, C)."""
    return m.head(T.reduce_mean(m.head_norm(x), axis=1))


def trunk_forward(m: EncoderModel, frames) -> Tensor:
    """Residual stream after the last block, (M, N, D)."""
    x = embed(m, frames)
    for block in m.blocks:
        x = block(x)
    return x


def trunk_is_frozen(m: EncoderModel) -> bool:
    head = {id(p) for p in m.head_norm.parameters() + m.head.parameters()}
    return not any(p.trainable for p in m.parameters() if id(p) not in head)


def capture_features(m: EncoderModel, frames) -> list[Tensor]:
    return model_forward(m, frames, capture=True)[1]


# -- checkpoints -------------------------------------------------------

MANIFEST_NAME = "manifest.json"


def save_checkpoint(model: EncoderModel, path, extra: dict | None = None) -> None:
    """Zip archive: one TNSR entry per parameter plus a JSON manifest."""
    manifest = {"model": model.config.to_dict(), "method": model.petl.to_dict(),
                "parameters": [name for name, _ in model.named_parameters()]}
    if extra:
        manifest.update(extra)
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name, p in model.named_parameters():
            info = zipfile.ZipInfo(f"tensors/{name}.tnsr", date_time=(1980, 1, 1, 0, 0, 0))
            zf.writestr(info, T.tensor_to_bytes(p))
        info = zipfile.ZipInfo(MANIFEST_NAME, date_time=(1980, 1, 1, 0, 0, 0))
        zf.writestr(info, json.dumps(manifest, indent=2, sort_keys=True))


def read_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    try:
        zf = zipfile.ZipFile(path)
    except zipfile.BadZipFile as exc:
        raise FormatError(f"{path}: not a checkpoint archive") from exc
    with zf:
        try:
            manifest = json.loads(zf.read(MANIFEST_NAME))
        except KeyError as exc:
            raise FormatError(f"{path}: checkpoint has no {MANIFEST_NAME}") from exc
        state = {}
        for info in zf.infolist():
            if info.filename.startswith("tensors/") and info.filename.endswith(".tnsr"):
                name = info.filename[len("tensors/"):-len(".tnsr")]
                state[name] = T.read_tensor(io.BytesIO(zf.read(info))).data
    return state, manifest


def load_checkpoint(path) -> tuple[EncoderModel, dict]:
    state, manifest = read_checkpoint(path)
    try:
        cfg = ModelConfig(**manifest["model"])
        petl = PetlConfig(**manifest["method"])
    except (KeyError, TypeError) as exc:
        raise CompatibilityError(f"{path}: manifest lacks a usable model/method table") from exc
    model = EncoderModel(cfg, petl)
    model.load_state_dict(state)
    return model, manifest
