"""Cross-entropy training with Adam, stepped learning-rate decay and early stopping."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .data import LabeledDataset, batches
from .tensor import NonFiniteError, Tensor
from .vim_model import (
    SCRATCH,
    TrainPolicy,
    VimModel,
    forward,
    load_checkpoint,
    save_checkpoint,
    set_trainable,
)

log = logging.getLogger(__name__)

__all__ = [
    "TrainConfig",
    "AdamState",
    "EpochRecord",
    "TrainLog",
    "EarlyStop",
    "TrainingError",
    "cross_entropy",
    "adam_step",
    "lr_at",
    "early_stop_check",
    "predict_proba",
    "evaluate",
    "fit",
]


class TrainingError(RuntimeError):
    pass


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under ``softmax(logits)``."""
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    z = logits.data.reshape(-1, logits.shape[-1])
    k = z.shape[1]
    if labels.shape[0] != z.shape[0]:
        raise ValueError(f"cross_entropy: {z.shape[0]} logit rows vs {labels.shape[0]} labels")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"cross_entropy: label outside [0, {k})")
    zs = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(zs).sum(axis=1))
    rows = np.arange(z.shape[0])
    loss = np.mean(lse - zs[rows, labels])

    def grad_fn(g):
        p = np.exp(zs - lse[:, None])
        p[rows, labels] -= 1.0
        return ((g / z.shape[0]) * p).reshape(logits.shape).astype(logits.data.dtype, copy=False),

    return T.record("cross_entropy", np.asarray(loss), (logits,), grad_fn)


# --------------------------------------------------------------------------
# Adam
# --------------------------------------------------------------------------


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: Sequence[Tensor], **kw) -> "AdamState":
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params], **kw)


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray | None], state: AdamState, lr: float) -> None:
    """One bias-corrected Adam update in place; frozen or gradient-less params are skipped."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for i, (p, g) in enumerate(zip(params, grads)):
        if not p.requires_grad or g is None:
            continue
        if g.shape != p.shape:
            raise ValueError(f"adam_step: grad {g.shape} does not match param {p.shape}")
        m, v = state.m[i], state.v[i]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def _clip(grads: list[np.ndarray | None], max_norm: float) -> None:
    total = math.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads if g is not None))
    if total > max_norm:
        s = max_norm / (total + 1e-12)
        for g in grads:
            if g is not None:
                g *= s


# --------------------------------------------------------------------------
# Schedule and early stopping
# --------------------------------------------------------------------------


@dataclass
class TrainConfig:
    strategy: TrainPolicy = SCRATCH
    base_lr: float = 1e-3
    lr_decay_factor: float = 0.1
    lr_decay_epochs: list[int] | None = None  # None: decay at 50% and 75% of max_epochs
    max_epochs: int = 20
    patience: int = 5
    batch_size: int = 32
    seed: int = 0
    init_checkpoint: str | None = None
    clip_grad_norm: float | None = None

    def __post_init__(self):
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if not 0.0 < self.lr_decay_factor < 1.0:
            raise ValueError("lr_decay_factor must be in (0, 1)")
        if self.max_epochs < 1 or self.batch_size < 1:
            raise ValueError("max_epochs and batch_size must be >= 1")
        if self.strategy.kind != "scratch" and not self.init_checkpoint:
            raise ValueError(f"strategy {self.strategy} requires init_checkpoint")
        if self.lr_decay_epochs is None:
            self.lr_decay_epochs = [self.max_epochs // 2, (3 * self.max_epochs) // 4]


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    n = sum(1 for d in cfg.lr_decay_epochs if d <= epoch)
    return cfg.base_lr * cfg.lr_decay_factor**n


@dataclass(frozen=True)
class EarlyStop:
    stop: bool
    best_epoch: int


def early_stop_check(val_acc: Sequence[float], patience: int, val_loss: Sequence[float] | None = None) -> EarlyStop:
    """Decide whether to stop after the last recorded epoch (epochs are 0-based indices).

    An epoch improves on the best so far when its accuracy is strictly higher,
    or equal with strictly lower loss.
    """
    if not val_acc:
        raise ValueError("early_stop_check needs at least one epoch")
    best = 0
    for e in range(1, len(val_acc)):
        if val_acc[e] > val_acc[best] or (
            val_loss is not None and val_acc[e] == val_acc[best] and val_loss[e] < val_loss[best]
        ):
            best = e
    return EarlyStop(len(val_acc) - 1 - best >= patience, best)


# --------------------------------------------------------------------------
# Logs
# --------------------------------------------------------------------------


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_acc: float
    lr: float
    seconds: float


@dataclass
class TrainLog:
    epochs: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = -1
    stop_reason: str = ""

    def losses(self) -> list[float]:
        return [r.train_loss for r in self.epochs]

    def epochs_to(self, val_acc: float) -> int | None:
        """1-based count of epochs until validation accuracy first reached ``val_acc``."""
        for r in self.epochs:
            if r.val_acc >= val_acc:
                return r.epoch + 1
        return None

    def to_jsonl(self) -> str:
        lines = [json.dumps(asdict(r)) for r in self.epochs]
        lines.append(json.dumps({"best_epoch": self.best_epoch, "stop_reason": self.stop_reason}))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_jsonl(cls, text: str) -> "TrainLog":
        out = cls()
        for line in text.splitlines():
            if not line.strip():
                continue
            d = json.loads(line)
            if "stop_reason" in d:
                out.best_epoch, out.stop_reason = d["best_epoch"], d["stop_reason"]
            else:
                out.epochs.append(EpochRecord(**d))
        return out


# --------------------------------------------------------------------------
# Evaluation helpers
# --------------------------------------------------------------------------


def predict_proba(model: VimModel, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
    out = []
    with T.no_grad():
        for s in range(0, len(images), batch_size):
            out.append(T.softmax(forward(images[s : s + batch_size], model)).data)
    if not out:
        return np.zeros((0, model.cfg.num_classes), dtype=T.get_dtype())
    return np.concatenate(out)


def evaluate(model: VimModel, ds: LabeledDataset, batch_size: int = 64) -> tuple[float, float, np.ndarray]:
    """(mean loss, accuracy, probabilities) on a dataset."""
    images, labels = ds.arrays(model.cfg.image_size)
    probs = predict_proba(model, images, batch_size)
    if len(labels) == 0:
        return float("nan"), float("nan"), probs
    p_true = probs[np.arange(len(labels)), labels].astype(np.float64)
    loss = float(-np.mean(np.log(np.maximum(p_true, 1e-12))))
    acc = float(np.mean(probs.argmax(axis=1) == labels))
    return loss, acc, probs


# --------------------------------------------------------------------------
# fit
# --------------------------------------------------------------------------


def fit(
    model: VimModel,
    train: LabeledDataset,
    val: LabeledDataset,
    cfg: TrainConfig,
    out_dir=None,
    on_epoch: Callable[[EpochRecord], None] | None = None,
) -> tuple[VimModel, TrainLog]:
    """Train ``model`` under ``cfg``; the returned model carries the best-epoch weights."""
    if len(val) == 0:
        raise TrainingError("validation split is empty; early stopping needs validation data")
    if cfg.init_checkpoint:
        model = load_checkpoint(cfg.init_checkpoint, cfg=model.cfg, replace_head=True, seed=cfg.seed)
    set_trainable(model, cfg.strategy)
    params = model.parameters()
    state = AdamState.for_params(params)
    tape = T.current_tape()
    tape.reset()
    out = Path(out_dir) if out_dir is not None else None
    size = model.cfg.image_size

    history = TrainLog()
    best_state = model.state_dict()
    accs: list[float] = []
    vlosses: list[float] = []
    for epoch in range(cfg.max_epochs):
        t0 = time.perf_counter()
        lr = lr_at(epoch, cfg)
        total, count = 0.0, 0
        for b, (x, y) in enumerate(batches(train, cfg.batch_size, cfg.seed, epoch, size)):
            model.zero_grad()
            try:
                loss = cross_entropy(forward(x, model), y)
                T.backward(loss, tape, params=[p for p in params if p.requires_grad])
            except NonFiniteError as exc:
                tape.reset()
                raise TrainingError(f"epoch {epoch} batch {b}: {exc}") from exc
            grads = [p.grad if p.requires_grad else None for p in params]
            if cfg.clip_grad_norm:
                _clip(grads, cfg.clip_grad_norm)
            adam_step(params, grads, state, lr)
            total += loss.item() * len(y)
            count += len(y)
        vloss, vacc, _ = evaluate(model, val)
        rec = EpochRecord(epoch, total / max(count, 1), vloss, vacc, lr, time.perf_counter() - t0)
        history.epochs.append(rec)
        accs.append(vacc)
        vlosses.append(vloss)
        es = early_stop_check(accs, cfg.patience, vlosses)
        if es.best_epoch == epoch:
            best_state = model.state_dict()
            if out is not None:
                save_checkpoint(model, out / "best.vimc")
        log.info("epoch %d loss %.4f val_loss %.4f val_acc %.4f lr %.2e", epoch, rec.train_loss, vloss, vacc, lr)
        if on_epoch is not None:
            on_epoch(rec)
        history.best_epoch = es.best_epoch
        if es.stop:
            history.stop_reason = "early_stop"
            break
    else:
        history.stop_reason = "max_epochs"
    if out is not None:
        save_checkpoint(model, out / "last.vimc")
    model.load_state_dict(best_state)
    model.zero_grad()
    return model, history
