"""Parameter audits against the published budgets, and layer-wise CKA similarity."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import CompatibilityError, ConfigError, ContractError, DimensionError
from .model import EncoderModel, ModelConfig, capture_features
from .petl import PetlConfig, expected_branch_params
from .tensor import Tensor

# -- closed-form counts ------------------------------------------------


def head_params(dim: int, classes: int) -> int:
    """Final LayerNorm (2D) plus the linear classifier (DC + C)."""
    return 2 * dim + dim * classes + classes


def backbone_params(config: ModelConfig) -> int:
    d = config.dim
    per_block = 2 * (2 * d) + (3 * d * d + 3 * d) + (d * d + d) + (4 * d * d + 4 * d) + (4 * d * d + d)
    return (config.in_features * d + d) + config.max_len * d + config.blocks * per_block


def expected_trainable(config: ModelConfig, petl: PetlConfig) -> int:
    head = head_params(config.dim, config.classes)
    if petl.kind == "full_finetune":
        return backbone_params(config) + head
    return expected_branch_params(petl, config.dim, config.blocks) + head


# -- published budgets -------------------------------------------------

# Params columns of the three result tables, in thousands. Two-column rows are
# (4-class dataset, 5-class datasets); the non-shared table reports only the
# 5-class dataset.
REFERENCE_VERSION = 1
REFERENCE_TOLERANCE = 0.10
TABLE_CLASSES = {"table1": (4, 5), "table2": (5,), "table3": (4, 5)}

_REFERENCE_K = {
    "table1-probe": (4.9, 5.6),
    "table1-adapter256": (10.2, 11.0),
    "table1-adapter128": (14.9, 15.6),
    "table1-adapter64": (24.1, 24.8),
    "table1-hpt4": (7.9, 8.7),
    "table1-hpt8": (11.0, 11.8),
    "table1-hpt16": (17.2, 18.0),
    "table2-probe": (5.6,),
    "table2-adapter256": (70.2,),
    "table2-adapter128": (125.0,),
    "table2-adapter64": (236.0,),
    "table2-hpt4": (42.6,),
    "table2-hpt8": (79.6,),
    "table2-hpt16": (153.0,),
    "table3-lora6": (14.1, 14.9),
    "table3-lora12": (23.3, 24.1),
    "table3-ssf-layernorm": (6.4, 7.2),
    "table3-ssf-mhsa": (12.5, 13.3),
    "table3-ssf-mhsa-ffn": (21.8, 22.5),
}


def _preset_method(name: str) -> PetlConfig:
    table, _, row = name.partition("-")
    shared = table != "table2"
    if row == "probe":
        return PetlConfig(kind="linear_probe", shared=shared)
    if row.startswith("adapter"):
        return PetlConfig(kind="adapter", rate=int(row[len("adapter"):]), shared=shared)
    if row.startswith("hpt"):
        return PetlConfig(kind="hpt", bins=int(row[len("hpt"):]), shared=shared)
    if row.startswith("lora"):
        return PetlConfig(kind="lora", rank=int(row[len("lora"):]), alpha=1.0, shared=shared)
    if row.startswith("ssf-"):
        return PetlConfig(kind="ssf", insertions=row[len("ssf-"):].replace("-", "_"), shared=shared)
    raise ConfigError(f"cannot map preset {name!r} to a method")


@dataclass(frozen=True)
class Preset:
    name: str
    method: PetlConfig
    reference_k: tuple[float, ...]
    classes: tuple[int, ...]

    def model_config(self, classes: int) -> ModelConfig:
        # full-scale extents; the frame front end (128 mel bins) is frozen and never trained
        return ModelConfig(dim=768, heads=12, blocks=12, in_features=128, max_len=512, classes=classes)


PRESETS = {name: Preset(name, _preset_method(name), vals, TABLE_CLASSES[name.split("-")[0]])
           for name, vals in _REFERENCE_K.items()}


def get_preset(name: str) -> Preset:
    try:
        return PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; available: {', '.join(sorted(PRESETS))}") from None


# -- audits ------------------------------------------------------------


@dataclass
class ParamAudit:
    modules: dict[str, int]
    trainable: int
    frozen: int
    trainable_only: bool
    expected_trainable: int | None = None
    reference: float | None = None
    label: str = ""

    @property
    def total(self) -> int:
        return self.trainable + self.frozen

    @property
    def matches_formula(self) -> bool | None:
        return None if self.expected_trainable is None else self.expected_trainable == self.trainable

    @property
    def reference_delta(self) -> float | None:
        """Relative difference (counted - published) / published."""
        if self.reference is None:
            return None
        return (self.trainable - self.reference) / self.reference

    @property
    def within_reference_tolerance(self) -> bool | None:
        delta = self.reference_delta
        return None if delta is None else abs(delta) <= REFERENCE_TOLERANCE

    def to_csv(self) -> str:
        rows = ["module,count"] + [f"{name},{count}" for name, count in self.modules.items()]
        rows.append(f"total_trainable,{self.trainable}")
        rows.append(f"total_frozen,{self.frozen}")
        return "\n".join(rows) + "\n"

    def to_dict(self) -> dict:
        return {"label": self.label, "modules": dict(self.modules), "trainable": self.trainable,
                "frozen": self.frozen, "trainable_only": self.trainable_only,
                "expected_trainable": self.expected_trainable, "reference": self.reference,
                "reference_delta": self.reference_delta}


def _module_key(name: str) -> str:
    parts = name.split(".")
    if parts[0] == "blocks" and len(parts) > 2:
        return ".".join(parts[:3])
    return parts[0]


def count_params(model: EncoderModel, trainable_only: bool = True,
                 reference: float | None = None) -> ParamAudit:
    """Walk registered parameters and sum extents per module.

    With ``trainable_only`` the module table lists trainable counts only;
    otherwise every parameter is listed. Shared modules are counted once.
    """
    modules: dict[str, int] = {}
    trainable = frozen = 0
    for name, p in model.named_parameters():
        if p.trainable:
            trainable += p.size
        else:
            frozen += p.size
        if p.trainable or not trainable_only:
            key = _module_key(name)
            modules[key] = modules.get(key, 0) + p.size
    return ParamAudit(modules, trainable, frozen, trainable_only,
                      expected_trainable=expected_trainable(model.config, model.petl),
                      reference=reference, label=model.petl.label)


def audit_preset(name: str) -> list[ParamAudit]:
    """One audit per dataset column of the preset's table row."""
    preset = get_preset(name)
    audits = []
    for classes, ref_k in zip(preset.classes, preset.reference_k):
        model = EncoderModel(preset.model_config(classes), preset.method)
        audit = count_params(model, trainable_only=True, reference=ref_k * 1000.0)
        audit.label = f"{name} (C={classes})"
        audits.append(audit)
    return audits


# -- similarity --------------------------------------------------------


def _as_matrix(x) -> np.ndarray:
    arr = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise DimensionError(f"cka expects an (M, D) feature matrix, got shape {arr.shape}")
    return arr


def cka_linear(features_a, features_b) -> float:
    """Linear CKA of two (M, D) feature matrices; 0 when either side is degenerate."""
    a = _as_matrix(features_a)
    b = _as_matrix(features_b)
    if a.shape[0] != b.shape[0]:
        raise DimensionError(f"cka: row counts differ ({a.shape[0]} vs {b.shape[0]})")
    if a.shape[0] < 2:
        raise ContractError("cka needs at least two rows")
    a = a - a.mean(axis=0)
    b = b - b.mean(axis=0)
    cross = np.linalg.norm(a.T @ b) ** 2
    denom = np.linalg.norm(a.T @ a) * np.linalg.norm(b.T @ b)
    if denom == 0.0 or not math.isfinite(denom):
        return 0.0
    return float(min(max(cross / denom, 0.0), 1.0))


@dataclass
class SimilarityReport:
    scores: list[float]
    candidate: str = ""
    reference: str = ""
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.scores)

    def to_csv(self) -> str:
        return "block,score\n" + "".join(f"{i},{s:.12g}\n" for i, s in enumerate(self.scores))


def similarity_scores(feats_a, feats_b) -> list[float]:
    """Per-block CKA between two equally long lists of (M, D) features."""
    if len(feats_a) != len(feats_b):
        raise CompatibilityError(f"block counts differ ({len(feats_a)} vs {len(feats_b)})")
    return [cka_linear(a, b) for a, b in zip(feats_a, feats_b)]


def token_mean_features(model: EncoderModel, frames: np.ndarray, batch_size: int = 256) -> list[np.ndarray]:
    """Per block, the token-mean output for each probe sequence: a list of (M, D)."""
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 3:
        raise DimensionError(f"probe frames must be (M, N, F), got {frames.shape}")
    chunks: list[list[np.ndarray]] = [[] for _ in model.blocks]
    for lo in range(0, frames.shape[0], batch_size):
        feats = capture_features(model, Tensor._wrap(frames[lo:lo + batch_size]))
        for i, f in enumerate(feats):
            chunks[i].append(f.data.mean(axis=1))
    return [np.concatenate(c) for c in chunks]


def similarity_report(candidate: EncoderModel, reference: EncoderModel, probe_frames) -> SimilarityReport:
    ca, ra = candidate.config, reference.config
    if (ca.blocks, ca.dim) != (ra.blocks, ra.dim):
        raise CompatibilityError(
            f"architectures differ: candidate blocks={ca.blocks}, D={ca.dim}; "
            f"reference blocks={ra.blocks}, D={ra.dim}")
    scores = similarity_scores(token_mean_features(candidate, probe_frames),
                               token_mean_features(reference, probe_frames))
    return SimilarityReport(scores, candidate.petl.label, reference.petl.label,
                            {"probe_size": int(np.asarray(probe_frames).shape[0])})


def format_table(header: list[str], rows: list[list]) -> str:
    """Left-aligned text table for console echo."""
    cells = [header] + [[str(c) for c in row] for row in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)
