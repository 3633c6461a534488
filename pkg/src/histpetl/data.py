"""Synthetic zero-mean mixture datasets and the PTDS split file format.

Each class draws every frame feature from an equal-weight mixture of
N(+delta_c, sigma^2) and N(-delta_c, sigma^2). All classes share a zero mean,
so a mean-pooled representation carries no class signal; the classes differ
only in how their values are spread.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError, LabelRangeError, TruncationError

DATASET_MAGIC = b"PTDS"
DATASET_VERSION = 1
_HEADER = struct.Struct("<4sIIQQQ")
SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class SyntheticSpec:
    classes: int = 4
    train_per_class: int = 200
    val_per_class: int = 100
    test_per_class: int = 100
    seq_len: int = 32
    features: int = 16
    delta_base: float = 0.5
    delta_step: float = 0.5
    sigma: float = 0.2
    # per-sample recording gain, log-uniform on [1/gain_spread, gain_spread]
    gain_spread: float = 1.0
    # one mixture sign per frame shared by all its features, instead of one per feature
    coherent: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.classes < 2:
            raise ConfigError(f"need at least 2 classes, got {self.classes}")
        counts = (self.train_per_class, self.val_per_class, self.test_per_class)
        if min(counts) < 1 or self.seq_len < 1 or self.features < 1:
            raise ConfigError(f"split sizes and extents must be positive: {self}")
        if self.sigma < 0 or self.delta_base < 0:
            raise ConfigError("sigma and delta_base must be non-negative")
        if self.gain_spread < 1:
            raise ConfigError(f"gain_spread must be >= 1, got {self.gain_spread}")

    def deltas(self) -> np.ndarray:
        return self.delta_base + self.delta_step * np.arange(self.classes)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Split:
    frames: np.ndarray  # (M, N, F)
    labels: np.ndarray  # (M,) int64
    classes: int

    def __post_init__(self):
        self.frames = np.ascontiguousarray(self.frames, dtype=np.float64)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if self.frames.ndim != 3 or self.frames.shape[0] != self.labels.shape[0]:
            raise FormatError(f"frames {self.frames.shape} and labels {self.labels.shape} disagree")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.classes):
            raise LabelRangeError(f"labels must lie in [0, {self.classes})")

    def __len__(self) -> int:
        return self.labels.shape[0]


@dataclass
class DatasetBundle:
    train: Split
    val: Split
    test: Split
    classes: int
    manifest: dict = field(default_factory=dict)

    def split(self, name: str) -> Split:
        if name not in SPLITS:
            raise ConfigError(f"split must be one of {SPLITS}, got {name!r}")
        return getattr(self, name)


def _draw(rng: np.random.Generator, delta: float, sigma: float, gain_spread: float,
          shape, coherent: bool = False) -> np.ndarray:
    sign_shape = shape[:2] + (1,) if coherent else shape
    signs = rng.integers(0, 2, size=sign_shape) * 2 - 1
    values = signs * delta + sigma * rng.standard_normal(shape)
    log_s = math.log(gain_spread)
    gains = np.exp(rng.uniform(-log_s, log_s, size=(shape[0], 1, 1)))
    return gains * values


def gen_synthetic(spec: SyntheticSpec) -> DatasetBundle:
    deltas = spec.deltas()
    splits = {}
    per_class = {"train": spec.train_per_class, "val": spec.val_per_class, "test": spec.test_per_class}
    # one child stream per split keeps the splits independent draws
    streams = dict(zip(SPLITS, (np.random.default_rng(s) for s in np.random.SeedSequence(spec.seed).spawn(3))))
    for name in SPLITS:
        srng = streams[name]
        m = per_class[name]
        frames, labels = [], []
        for c, delta in enumerate(deltas):
            frames.append(_draw(srng, delta, spec.sigma, spec.gain_spread,
                                (m, spec.seq_len, spec.features), spec.coherent))
            labels.append(np.full(m, c))
        frames = np.concatenate(frames)
        labels = np.concatenate(labels)
        order = srng.permutation(labels.size)
        splits[name] = Split(frames[order], labels[order], spec.classes)
    manifest = {
        "generator": spec.to_dict(),
        "seed": spec.seed,
        "split_sizes": {name: len(splits[name]) for name in SPLITS},
        "moment_checks": moment_checks(splits["train"], spec),
    }
    return DatasetBundle(splits["train"], splits["val"], splits["test"], spec.classes, manifest)


def gain_second_moment(gain_spread: float) -> float:
    """E[g^2] for g = exp(u), u ~ U(-ln s, ln s)."""
    a = math.log(gain_spread)
    return 1.0 if a == 0 else math.sinh(2 * a) / (2 * a)


def moment_checks(split: Split, spec: SyntheticSpec) -> dict:
    """Per-class empirical mean and second moment against their sampling bounds.

    The mean bound is 3 standard errors of the class mean over all M*N*F
    entries. Entries are uncorrelated, except that coherent frames share one
    sign across their F features, which inflates the variance of the sum by
    F * delta_c^2 per frame.
    """
    g2 = gain_second_moment(spec.gain_spread)
    shared = spec.features if spec.coherent else 1
    out = []
    for c, delta in enumerate(spec.deltas()):
        vals = split.frames[split.labels == c].ravel()
        var = g2 * (delta ** 2 + spec.sigma ** 2)
        mean_var = g2 * (shared * delta ** 2 + spec.sigma ** 2)
        mean_bound = 3.0 * math.sqrt(mean_var) / math.sqrt(vals.size)
        # second-moment stderr from per-sample means: samples are the independent units
        per_sample = (split.frames[split.labels == c] ** 2).mean(axis=(1, 2))
        out.append({
            "class": c,
            "mean": float(vals.mean()),
            "mean_bound": float(mean_bound),
            "mean_within_bound": bool(abs(vals.mean()) <= mean_bound),
            "second_moment": float(per_sample.mean()),
            "expected_second_moment": float(var),
            "second_moment_stderr": float(per_sample.std(ddof=1) / math.sqrt(per_sample.size)),
        })
    return {"per_class": out}


# -- PTDS binary format ------------------------------------------------

def encode_split(split: Split) -> bytes:
    m, n, f = split.frames.shape
    head = _HEADER.pack(DATASET_MAGIC, DATASET_VERSION, split.classes, m, n, f)
    return (head + split.labels.astype("<u4").tobytes()
            + split.frames.astype("<f8").tobytes())


def decode_split(buf: bytes, source: str = "<bytes>") -> Split:
    if len(buf) < 4 or buf[:4] != DATASET_MAGIC:
        raise FormatError(f"{source}: bad magic {bytes(buf[:4])!r}, expected {DATASET_MAGIC!r}")
    if len(buf) < _HEADER.size:
        raise TruncationError(f"{source}: header truncated ({len(buf)} bytes)")
    _, version, classes, m, n, f = _HEADER.unpack_from(buf)
    if version != DATASET_VERSION:
        raise FormatError(f"{source}: unsupported dataset version {version}")
    need = _HEADER.size + 4 * m + 8 * m * n * f
    if len(buf) < need:
        raise TruncationError(f"{source}: expected {need} bytes, found {len(buf)}")
    if len(buf) > need:
        raise FormatError(f"{source}: {len(buf) - need} trailing bytes")
    off = _HEADER.size
    labels = np.frombuffer(buf, dtype="<u4", count=m, offset=off).astype(np.int64)
    if m and labels.max() >= classes:
        raise LabelRangeError(f"{source}: label {int(labels.max())} outside [0, {classes})")
    frames = np.frombuffer(buf, dtype="<f8", count=m * n * f, offset=off + 4 * m).reshape(m, n, f)
    if not np.all(np.isfinite(frames)):
        raise FormatError(f"{source}: frames contain NaN or Inf")
    return Split(frames.copy(), labels, classes)


def write_split(split: Split, path) -> None:
    Path(path).write_bytes(encode_split(split))


def read_split(path) -> Split:
    path = Path(path)
    return decode_split(path.read_bytes(), str(path))


def write_dataset(bundle: DatasetBundle, out_dir) -> dict[str, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {}
    for name in SPLITS:
        paths[name] = out_dir / f"{name}.ptds"
        write_split(bundle.split(name), paths[name])
    manifest = dict(bundle.manifest, classes=bundle.classes,
                    files={k: v.name for k, v in paths.items()})
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return paths


def read_dataset(data_dir) -> DatasetBundle:
    data_dir = Path(data_dir)
    manifest_path = data_dir / "manifest.json"
    manifest = json.loads(manifest_path.read_text()) if manifest_path.exists() else {}
    files = manifest.get("files", {name: f"{name}.ptds" for name in SPLITS})
    splits = {name: read_split(data_dir / files[name]) for name in SPLITS}
    classes = {s.classes for s in splits.values()}
    if len(classes) != 1:
        raise FormatError(f"{data_dir}: splits disagree on class count {sorted(classes)}")
    return DatasetBundle(splits["train"], splits["val"], splits["test"], classes.pop(), manifest)
