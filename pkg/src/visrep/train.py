"""Losses, metrics, optimizers, schedules, freezing, and the training loop.

Three regimes share one loop: triplet metric learning on the embedding,
single-task classification, and sentinel-masked multitask classification.
Modes modify the freeze policy: full runs a frozen warmup phase then
unfreezes the top of the backbone, linear_probe keeps the backbone frozen
throughout, pseudo_zero_shot performs exactly one optimizer step.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .assembly import ModelGraph
from .data import SENTINEL, DatasetManifest, interleave_batches, sample_triplets
from .errors import ConfigError, NumericalAbort, ShapeError
from .nn import Module, Param
from .tensor import Tape, Tensor
from .vrt import save_checkpoint

__all__ = [
    "TrainPlan",
    "TrainLog",
    "StepRecord",
    "EpochRecord",
    "masked_cross_entropy",
    "masked_topk_accuracy",
    "triplet_loss",
    "Adam",
    "lr_at",
    "set_trainable",
    "train",
]

REGIMES = ("triplet", "single_task", "multitask")
OPTIMIZERS = ("adam", "adamw")
SCHEDULES = ("cosine", "polynomial")
MODES = ("full", "linear_probe", "pseudo_zero_shot")


@dataclass
class TrainPlan:
    regime: str = "multitask"
    epochs: int = 10
    warm_epochs_frozen: int = 1
    unfreeze_top_k_layers: int = 0  # 0 means the whole backbone in phase 2
    optimizer: str = "adamw"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float | None = None  # resolved per backbone family when unset
    weight_decay: float = 0.01
    base_lr: float = 2e-4
    schedule: str = "polynomial"
    poly_power: float = 1.0
    batch_size: int = 16
    margin: float = 0.2
    triplet_strategy: str = "batch_all"
    mode: str = "full"
    seed: int = 0

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise ConfigError(f"unknown regime '{self.regime}'")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"unknown optimizer '{self.optimizer}'")
        if self.schedule not in SCHEDULES:
            raise ConfigError(f"unknown schedule '{self.schedule}'")
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode '{self.mode}'")
        if not self.epochs >= self.warm_epochs_frozen >= 0:
            raise ConfigError(
                f"need epochs >= warm_epochs_frozen >= 0, got {self.epochs}, "
                f"{self.warm_epochs_frozen}"
            )
        if self.margin <= 0:
            raise ConfigError(f"margin must be positive, got {self.margin}")
        if self.base_lr <= 0:
            raise ConfigError(f"base_lr must be positive, got {self.base_lr}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.poly_power <= 0:
            raise ConfigError("polynomial power must be positive")
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise ConfigError("betas must lie in (0, 1)")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")
        if self.unfreeze_top_k_layers < 0:
            raise ConfigError("unfreeze_top_k_layers must be >= 0")


@dataclass
class StepRecord:
    step: int
    epoch: int
    loss: float
    lr: float
    wall_s: float


@dataclass
class EpochRecord:
    epoch: int
    task_top1: dict[str, float | None]
    task_top5: dict[str, float | None]
    retrieval: list[dict] = field(default_factory=list)


@dataclass
class TrainLog:
    steps: list[StepRecord] = field(default_factory=list)
    epochs: list[EpochRecord] = field(default_factory=list)
    empty_triplet_batches: int = 0

    def lines(self) -> list[str]:
        out = []
        for s in self.steps:
            out.append(
                json.dumps(
                    {
                        "kind": "step",
                        "step": s.step,
                        "epoch": s.epoch,
                        "loss": s.loss,
                        "lr": s.lr,
                        "wall_s": s.wall_s,
                    },
                    sort_keys=True,
                )
            )
        for e in self.epochs:
            out.append(
                json.dumps(
                    {
                        "kind": "epoch",
                        "epoch": e.epoch,
                        "top1": e.task_top1,
                        "top5": e.task_top5,
                        "retrieval": e.retrieval,
                    },
                    sort_keys=True,
                )
            )
        if self.empty_triplet_batches:
            out.append(
                json.dumps(
                    {"kind": "meta", "empty_triplet_batches": self.empty_triplet_batches},
                    sort_keys=True,
                )
            )
        return out

    def write(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self.lines()) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# losses and metrics


def masked_cross_entropy(
    logits_by_task: dict[str, Tensor], labels_by_task: dict[str, np.ndarray]
) -> Tensor:
    """Sum of per-task mean CE over non-sentinel rows; empty tasks add 0."""
    total: Tensor | None = None
    fallback: Tensor | None = None
    for task, logits in logits_by_task.items():
        labels = np.asarray(labels_by_task[task], dtype=np.int64)
        fallback = logits
        valid = np.nonzero(labels != SENTINEL)[0]
        if valid.size == 0:
            continue
        if valid.size == labels.shape[0]:
            rows = logits  # sentinel-free path stays bit-identical to plain CE
        else:
            rows = T.gather_rows(logits, valid)
        term = T.cross_entropy(rows, labels[valid])
        total = term if total is None else T.add(total, term)
    if total is None:
        if fallback is None:
            raise ConfigError("no tasks given")
        # all-sentinel batch: a zero that still participates in backward
        return T.mul(T.tsum(fallback), 0.0)
    return total


def masked_topk_accuracy(
    logits: Tensor | np.ndarray, labels: np.ndarray, k: int
) -> float | None:
    """Top-k accuracy over non-sentinel rows; None when no row is labeled."""
    if k < 1:
        raise ConfigError("k must be >= 1")
    arr = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    labels = np.asarray(labels, dtype=np.int64)
    valid = labels != SENTINEL
    if not valid.any():
        return None
    arr = arr[valid]
    lab = labels[valid]
    k = min(k, arr.shape[1])
    topk = np.argsort(-arr, axis=1, kind="stable")[:, :k]
    hits = (topk == lab[:, None]).any(axis=1)
    return float(hits.mean())


def triplet_loss(anchor: Tensor, positive: Tensor, negative: Tensor, margin: float) -> Tensor:
    """Hinge on squared Euclidean distances, averaged over the triplet list."""
    if not (anchor.shape == positive.shape == negative.shape):
        raise ShapeError(
            f"triplet shapes differ: {anchor.shape}, {positive.shape}, {negative.shape}"
        )
    dap = _sqdist(anchor, positive)
    dan = _sqdist(anchor, negative)
    hinge = T.relu(T.add(T.sub(dap, dan), Tensor(float(margin))))
    return T.tmean(hinge)


def _sqdist(a: Tensor, b: Tensor) -> Tensor:
    d = T.sub(a, b)
    return T.tsum(T.mul(d, d), axis=-1)


# ---------------------------------------------------------------------------
# optimizer and schedule


class Adam:
    """Adam, optionally with AdamW-style decoupled weight decay.

    Decay applies before the moment update so it never enters the moments.
    """

    def __init__(
        self,
        params: Sequence[tuple[str, Param]],
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
        weight_decay: float = 0.0,
        decoupled: bool = False,
    ):
        self.params = list(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.decoupled = decoupled
        self.t = 0
        self.m = {n: np.zeros_like(p.tensor.data) for n, p in self.params}
        self.v = {n: np.zeros_like(p.tensor.data) for n, p in self.params}

    def step(self, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1**self.t
        bc2 = 1.0 - b2**self.t
        for name, param in self.params:
            if not param.trainable:
                continue
            g = param.tensor.grad
            if g is None:
                continue
            if not np.all(np.isfinite(g)):
                raise NumericalAbort(f"non-finite gradient in '{name}'", step=self.t)
            p = param.tensor.data
            if self.decoupled and self.weight_decay:
                p -= lr * self.weight_decay * p
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def lr_at(
    schedule: str, step: int, total_steps: int, base_lr: float, power: float = 1.0
) -> float:
    if total_steps <= 0:
        raise ConfigError("total_steps must be positive")
    if not 0 <= step <= total_steps:
        raise ConfigError(f"step {step} outside [0, {total_steps}]")
    if step == 0:
        return base_lr
    if step == total_steps:
        return 0.0
    frac = step / total_steps
    if schedule == "cosine":
        return base_lr * 0.5 * (1.0 + float(np.cos(np.pi * frac)))
    if schedule == "polynomial":
        return base_lr * (1.0 - frac) ** power
    raise ConfigError(f"unknown schedule '{schedule}'")


# ---------------------------------------------------------------------------
# freeze policy


def set_trainable(model: ModelGraph, policy: str, k: int | None = None) -> ModelGraph:
    """Apply a freeze policy; top_k counts elementary layers from the output."""
    heads: list[Module] = []
    if model.embedding_head is not None:
        heads.append(model.embedding_head)
    heads.extend(model.class_heads.values())
    for h in heads:
        h.set_trainable(True)
    if policy == "all":
        model.backbone.set_trainable(True)
    elif policy == "heads_only":
        model.backbone.set_trainable(False)
    elif policy == "top_k":
        leaves = list(model.backbone.leaf_modules())
        if k is None or not 1 <= k <= len(leaves):
            raise ConfigError(
                f"top_k needs 1 <= k <= {len(leaves)} backbone layers, got {k}"
            )
        model.backbone.set_trainable(False)
        for leaf in leaves[-k:]:
            leaf.set_trainable(True)
    else:
        raise ConfigError(f"unknown freeze policy '{policy}'")
    return model


# ---------------------------------------------------------------------------
# the loop

EvalHook = Callable[[ModelGraph, int, TrainLog], None]


def _resolve_eps(plan: TrainPlan, model: ModelGraph) -> float:
    if plan.eps is not None:
        return plan.eps
    return 1e-8 if model.spec.family == "convnet" else 1e-7


class _MetricBank:
    def __init__(self):
        self.hits1: dict[str, int] = {}
        self.hits5: dict[str, int] = {}
        self.counts: dict[str, int] = {}

    def update(self, logits_by_task: dict[str, Tensor], labels_by_task) -> None:
        for task, logits in logits_by_task.items():
            labels = labels_by_task[task]
            valid = labels != SENTINEL
            n = int(valid.sum())
            if n == 0:
                continue
            a1 = masked_topk_accuracy(logits, labels, 1)
            a5 = masked_topk_accuracy(logits, labels, 5)
            self.hits1[task] = self.hits1.get(task, 0) + round(a1 * n)
            self.hits5[task] = self.hits5.get(task, 0) + round(a5 * n)
            self.counts[task] = self.counts.get(task, 0) + n

    def summary(self, tasks) -> tuple[dict, dict]:
        top1 = {}
        top5 = {}
        for t in tasks:
            n = self.counts.get(t, 0)
            top1[t] = (self.hits1[t] / n) if n else None
            top5[t] = (self.hits5[t] / n) if n else None
        return top1, top5


def train(
    model: ModelGraph,
    datasets: list[DatasetManifest],
    plan: TrainPlan,
    eval_hooks: Sequence[EvalHook] = (),
    loader=None,
    snapshot_dir: str | Path | None = None,
) -> tuple[ModelGraph, TrainLog]:
    """Run the full two-phase loop and return the trained model with its log."""
    if plan.regime == "multitask" and len(model.class_heads) < 2:
        raise ConfigError("multitask regime needs at least two classification heads")
    if plan.regime == "triplet" and model.embedding_head is None:
        raise ConfigError("triplet regime needs an embedding head")
    if plan.regime in ("single_task", "multitask") and not model.class_heads:
        raise ConfigError("classification regimes need classification heads")
    for ds in datasets:
        if plan.regime != "triplet" and ds.task_name not in model.class_heads:
            raise ConfigError(f"no head for task '{ds.task_name}'")

    rng = np.random.default_rng(plan.seed)
    per = plan.batch_size // len(datasets)
    if plan.batch_size % len(datasets) or per < 1:
        raise ConfigError(
            f"batch size {plan.batch_size} not divisible across {len(datasets)} datasets"
        )
    steps_per_epoch = min(len(ds.rows) for ds in datasets) // per
    if steps_per_epoch == 0:
        raise ConfigError("smallest dataset cannot fill a single batch")

    single_step = plan.mode == "pseudo_zero_shot"
    total_epochs = 1 if single_step else plan.epochs
    total_steps = 1 if single_step else plan.epochs * steps_per_epoch
    eps = _resolve_eps(plan, model)

    opt = Adam(
        list(model.named_params()),
        beta1=plan.beta1,
        beta2=plan.beta2,
        eps=eps,
        weight_decay=plan.weight_decay if plan.optimizer == "adamw" else 0.0,
        decoupled=plan.optimizer == "adamw",
    )

    log = TrainLog()
    task_names = list(model.class_heads)
    step = 0
    loader_args = {} if loader is None else {"loader": loader}

    def apply_phase(epoch: int) -> None:
        if plan.mode in ("linear_probe", "pseudo_zero_shot") or epoch < plan.warm_epochs_frozen:
            set_trainable(model, "heads_only")
        elif plan.unfreeze_top_k_layers > 0:
            set_trainable(model, "top_k", plan.unfreeze_top_k_layers)
        else:
            set_trainable(model, "all")

    try:
        for epoch in range(total_epochs):
            apply_phase(epoch)
            model.set_mode(True)
            bank = _MetricBank()
            for batch in interleave_batches(datasets, plan.batch_size, rng, **loader_args):
                t0 = time.perf_counter()
                lr = lr_at(
                    plan.schedule, step, total_steps, plan.base_lr, plan.poly_power
                )
                model.zero_grads()
                with Tape() as tape:
                    if plan.regime == "triplet":
                        emb = model.embed(batch.images)
                        trips = sample_triplets(
                            emb.data, batch.listing_ids, plan.triplet_strategy, plan.margin
                        )
                        if not trips:
                            log.empty_triplet_batches += 1
                            continue
                        idx = np.asarray(
                            [(t.anchor, t.positive, t.negative) for t in trips],
                            dtype=np.int64,
                        )
                        loss = triplet_loss(
                            T.gather_rows(emb, idx[:, 0]),
                            T.gather_rows(emb, idx[:, 1]),
                            T.gather_rows(emb, idx[:, 2]),
                            plan.margin,
                        )
                    else:
                        logits = model.classify(batch.images)
                        loss = masked_cross_entropy(logits, batch.labels)
                        bank.update(logits, batch.labels)
                    loss_val = float(loss.item())
                    if not np.isfinite(loss_val):
                        if snapshot_dir is not None:
                            save_checkpoint(
                                Path(snapshot_dir) / f"abort_step{step:05d}",
                                model.state_arrays(),
                            )
                        raise NumericalAbort("non-finite loss", step=step)
                    tape.backward(loss)
                opt.step(lr)
                step += 1
                log.steps.append(
                    StepRecord(step, epoch, loss_val, lr, time.perf_counter() - t0)
                )
                if step >= total_steps:
                    break
            top1, top5 = bank.summary(task_names)
            log.epochs.append(EpochRecord(epoch, top1, top5))
            model.set_mode(False)
            for hook in eval_hooks:
                hook(model, epoch, log)
            if step >= total_steps:
                break
    except NumericalAbort:
        if snapshot_dir is not None and not any(Path(snapshot_dir).glob("abort_*")):
            save_checkpoint(Path(snapshot_dir) / f"abort_step{step:05d}", model.state_arrays())
        raise
    model.set_mode(False)
    return model, log
