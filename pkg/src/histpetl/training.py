"""Cross-entropy objective, AdamW, and the early-stopped training loop."""

from __future__ import annotations

import json
import math
import time
from functools import partial
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .data import SPLITS, DatasetBundle, Split
from .errors import ConfigError, ContractError, DimensionError
from .layers import Parameter
from .model import head_forward, trunk_forward, trunk_is_frozen
from .tensor import Tensor

PETL_LR = 1e-3
FULL_FINETUNE_LR = 1e-5


@dataclass
class TrainConfig:
    lr: float = PETL_LR
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    batch_size: int = 64
    max_epochs: int = 200
    patience: int = 20
    seed: int = 0

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.patience < 1 or self.max_epochs < 1 or self.batch_size < 1:
            raise ConfigError("patience, max_epochs and batch_size must be >= 1")
        if self.weight_decay < 0 or not all(0 <= b < 1 for b in self.betas):
            raise ConfigError("weight_decay must be >= 0 and betas in [0, 1)")

    @classmethod
    def for_method(cls, kind: str, **overrides) -> "TrainConfig":
        lr = FULL_FINETUNE_LR if kind == "full_finetune" else PETL_LR
        return cls(**{"lr": lr, **overrides})

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean of -log softmax(logits)[label]; accepts (C,) with an int or (M, C) with M labels."""
    logits = T.as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim == 1:
        logits = T.reshape(logits, (1,) + logits.shape)
        labels = labels.reshape(1)
    classes = logits.shape[-1]
    if labels.shape != logits.shape[:1]:
        raise DimensionError(f"{labels.shape[0] if labels.ndim else 1} labels for {logits.shape[0]} rows")
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise ContractError(f"labels must lie in [0, {classes}), got {labels.tolist()}")
    return T.neg(T.reduce_mean(T.pick(T.log_softmax(logits, axis=-1), labels)))


class AdamW:
    """Adam with decoupled weight decay; touches only trainable parameters."""

    def __init__(self, params, cfg: TrainConfig):
        self.params: list[Parameter] = [p for p in params if p.trainable]
        self.cfg = cfg
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self) -> None:
        self.t += 1
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        adamw_step(self.params, grads, (self.m, self.v), self.cfg, self.t)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def adamw_step(params, grads, state, cfg: TrainConfig, t: int) -> None:
    """theta -= lr*wd*theta + lr * m_hat / (sqrt(v_hat) + eps), in place."""
    if t < 1:
        raise ContractError("adamw step counter starts at 1")
    b1, b2 = cfg.betas
    ms, vs = state
    for p, g, m, v in zip(params, grads, ms, vs):
        if not p.requires_grad:
            continue
        g = np.asarray(g)
        if g.shape != p.shape:
            raise DimensionError(f"grad shape {g.shape} vs parameter {p.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        decay = cfg.lr * cfg.weight_decay * p.data
        p.data -= decay + cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)


class EarlyStopping:
    """Stop once ``patience`` consecutive epochs fail to strictly beat the best loss."""

    def __init__(self, patience: int):
        if patience < 1:
            raise ConfigError("patience must be >= 1")
        self.patience = patience
        self.best = math.inf
        self.best_epoch = 0
        self.epoch = 0
        self.stale = 0

    def update(self, loss: float) -> bool:
        """Record one epoch's validation loss; True means stop now."""
        self.epoch += 1
        if loss < self.best:
            self.best = loss
            self.best_epoch = self.epoch
            self.stale = 0
        else:
            self.stale += 1
        return self.stale >= self.patience


@dataclass
class RunReport:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    val_acc: list[float] = field(default_factory=list)
    stop_epoch: int = 0
    best_epoch: int = 0
    best_val_loss: float = math.inf
    test_loss: float = math.nan
    test_accuracy: float = math.nan
    trainable_params: int = 0
    wall_seconds: float = 0.0
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def loss_csv(self) -> str:
        rows = ["epoch,train_loss,val_loss,val_acc"]
        for i, (tl, vl, va) in enumerate(zip(self.train_loss, self.val_loss, self.val_acc), 1):
            rows.append(f"{i},{tl:.9g},{vl:.9g},{va:.9g}")
        return "\n".join(rows) + "\n"


def evaluate(model, split: Split, batch_size: int = 256) -> tuple[float, float]:
    """Mean cross-entropy and top-1 accuracy, batched in index order.

    ``model`` is any callable mapping a (M, N, F) frame batch to (M, C) logits.
    """
    if len(split) == 0:
        raise ContractError("cannot evaluate an empty split")
    losses = np.empty(len(split))
    correct = np.empty(len(split), dtype=bool)
    for lo in range(0, len(split), batch_size):
        hi = min(lo + batch_size, len(split))
        logits = model(Tensor._wrap(split.frames[lo:hi])).data
        lsm = T.log_softmax(Tensor._wrap(logits), axis=-1).data
        y = split.labels[lo:hi]
        losses[lo:hi] = -lsm[np.arange(hi - lo), y]
        correct[lo:hi] = logits.argmax(axis=-1) == y
    return float(losses.mean()), float(correct.mean())


def _trunk_split(model, split: Split, batch_size: int = 256) -> Split:
    feats = [trunk_forward(model, Tensor._wrap(split.frames[lo:lo + batch_size])).data
             for lo in range(0, len(split), batch_size)]
    return Split(np.concatenate(feats), split.labels, split.classes)


def train_epoch(model, opt: AdamW, split: Split, cfg: TrainConfig, rng: np.random.Generator) -> float:
    order = rng.permutation(len(split))
    total, seen = 0.0, 0
    for lo in range(0, len(order), cfg.batch_size):
        idx = order[lo:lo + cfg.batch_size]
        opt.zero_grad()
        loss = cross_entropy(model(Tensor._wrap(split.frames[idx])), split.labels[idx])
        T.backward(loss)
        opt.step()
        total += loss.item() * idx.size
        seen += idx.size
    return total / seen


def train(model, data: DatasetBundle, cfg: TrainConfig, log=None) -> RunReport:
    """Early-stopped AdamW training; restores the best-validation parameters before testing."""
    for name in ("train", "val", "test"):
        if len(data.split(name)) == 0:
            raise ContractError(f"{name} split is empty")
    start = time.perf_counter()
    forward = model
    if trunk_is_frozen(model):
        # nothing below the head trains: run the trunk once per split
        forward = partial(head_forward, model)
        data = DatasetBundle(*(_trunk_split(model, data.split(n)) for n in SPLITS), data.classes)
    rng = np.random.default_rng(cfg.seed)
    opt = AdamW(model.parameters(), cfg)
    stopper = EarlyStopping(cfg.patience)
    report = RunReport(trainable_params=model.num_parameters(trainable_only=True),
                       config={"train": cfg.to_dict()})
    best_state = {id(p): p.data.copy() for p in opt.params}
    for epoch in range(1, cfg.max_epochs + 1):
        train_loss = train_epoch(forward, opt, data.train, cfg, rng)
        val_loss, val_acc = evaluate(forward, data.val)
        report.train_loss.append(train_loss)
        report.val_loss.append(val_loss)
        report.val_acc.append(val_acc)
        stop = stopper.update(val_loss)
        if stopper.best_epoch == epoch:
            best_state = {id(p): p.data.copy() for p in opt.params}
        if log is not None:
            log(f"epoch {epoch:3d} train {train_loss:.4f} val {val_loss:.4f} acc {val_acc:.3f}")
        if stop:
            break
    for p in opt.params:
        p.data[...] = best_state[id(p)]
    report.stop_epoch = len(report.val_loss)
    report.best_epoch = stopper.best_epoch
    report.best_val_loss = stopper.best
    report.test_loss, report.test_accuracy = evaluate(forward, data.test)
    report.wall_seconds = time.perf_counter() - start
    return report
