"""Loss, AdamW, cosine schedule and the training/evaluation loops."""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
import os
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from . import ndtensor as nd
from .exceptions import ConfigError, DataError
from .metrics import accuracy, cat_miou, ins_miou
from .model import ModelSpec, forward, init_weights
from .ndtensor import Tensor
from .neighbors import knn
from .pcio import Dataset, augment
from .weights import Weights, save_weights

logger = logging.getLogger(__name__)


class TrainingDiverged(FloatingPointError):
    """Raised when a loss or gradient becomes NaN/Inf."""


@dataclass
class TrainConfig:
    lr_init: float = 1e-4
    lr_final: float = 1e-8
    epochs: int = 30
    batch: int = 16
    weight_decay: float = 1e-5
    dropout: float = 0.5
    seed: int = 0
    task: str = "classification"
    schedule: str = "epoch"
    jitter: float = 0.0
    rotate: bool = False
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        problems = []
        if self.lr_final > self.lr_init:
            problems.append("lr_final must not exceed lr_init")
        if self.epochs < 1:
            problems.append("epochs must be >= 1")
        if self.batch < 1:
            problems.append("batch must be >= 1")
        if self.schedule not in ("epoch", "step"):
            problems.append(f"schedule must be 'epoch' or 'step', got {self.schedule!r}")
        if not 0.0 <= self.dropout < 1.0:
            problems.append("dropout must lie in [0, 1)")
        if problems:
            raise ConfigError("; ".join(problems))


# --------------------------------------------------------------------- loss
def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under ``softmax(logits)``.

    ``logits`` is (B, C) with labels (B,), or (B, C, N) with labels (B, N).
    """
    labels = np.asarray(labels, dtype=np.int64)
    C = logits.shape[1]
    if labels.shape != (logits.shape[0],) + logits.shape[2:]:
        raise DataError(f"labels {labels.shape} do not match logits {logits.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= C):
        raise DataError(f"labels must lie in [0, {C})")
    logp = nd.log_softmax(logits, axis=1)
    picked = nd.take_along(logp, np.expand_dims(labels, 1), axis=1)
    return nd.scale(nd.sum(picked), -1.0 / labels.size)


# ---------------------------------------------------------------- optimizer
@dataclass
class AdamWState:
    m: List[np.ndarray]
    v: List[np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params, beta1=0.9, beta2=0.999, eps=1e-8) -> "AdamWState":
        arrays = [p.data if isinstance(p, Tensor) else np.asarray(p) for p in params]
        return cls([np.zeros_like(a) for a in arrays], [np.zeros_like(a) for a in arrays], 0, beta1, beta2, eps)


def adamw_step(params, grads, state: AdamWState, lr: float, weight_decay: float) -> AdamWState:
    """One AdamW update, in place.

    Weight decay is decoupled: ``p <- p - lr * wd * p`` is applied before and
    independently of the bias-corrected Adam step.
    """
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1**state.step
    c2 = 1 - b2**state.step
    for i, (p, g) in enumerate(zip(params, grads)):
        data = p.data if isinstance(p, Tensor) else p
        if g is None:
            g = np.zeros_like(data)
        if g.shape != data.shape:
            raise DataError(f"gradient shape {g.shape} != parameter shape {data.shape}")
        if weight_decay:
            data -= (lr * weight_decay) * data
        m, v = state.m[i], state.v[i]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        data -= (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(data.dtype, copy=False)
    return state


def cosine_lr(step: int, total_steps: int, lr_init: float = 1e-4, lr_final: float = 1e-8) -> float:
    """Cosine annealing from ``lr_init`` at step 0 to ``lr_final`` at ``total_steps``."""
    if not 0 <= step <= total_steps:
        raise ConfigError(f"step {step} outside [0, {total_steps}]")
    if step == 0:
        return lr_init
    if step == total_steps:
        return lr_final
    return lr_final + 0.5 * (lr_init - lr_final) * (1 + math.cos(math.pi * step / total_steps))


# --------------------------------------------------------------- evaluation
def _arrays(ds: Dataset, spec: ModelSpec):
    pts, cls, parts = ds.stack()
    if pts.shape[1] != spec.n_points:
        raise DataError(f"{ds.split} clouds have {pts.shape[1]} points; model expects {spec.n_points}")
    labels = cls if spec.task == "classification" else parts
    if labels is None:
        kind = "class labels" if spec.task == "classification" else "per-point labels"
        raise DataError(f"{ds.split} split is missing {kind}")
    return pts, labels


def _level0_knn(pts: np.ndarray, k: int) -> np.ndarray:
    return knn(pts, min(k, pts.shape[1] - 1)).idx


def predict_logits(pts: np.ndarray, spec: ModelSpec, w: Weights, batch: int = 16, nbr=None) -> np.ndarray:
    out = []
    with nd.no_grad():
        for s in range(0, len(pts), batch):
            kwargs = {} if nbr is None else {"local_index": nbr[s : s + batch]}
            out.append(forward(pts[s : s + batch], spec, w, training=False, **kwargs).logits.data)
    return np.concatenate(out)


def evaluate(w: Weights, ds: Dataset, spec: ModelSpec, batch: int = 16, nbr=None) -> dict:
    """Eval-mode metrics and mean loss on a dataset."""
    pts, labels = _arrays(ds, spec)
    logits = predict_logits(pts, spec, w, batch, nbr)
    loss = float(cross_entropy(Tensor(logits.astype(np.float64)), labels).data)
    pred = np.argmax(logits, axis=1)
    if spec.task == "classification":
        return {"loss": loss, "accuracy": accuracy(pred, labels)}
    parts = [_instance_parts(ds, c) for c in ds.clouds]
    return {
        "loss": loss,
        "accuracy": accuracy(pred, labels),
        "ins_miou": ins_miou(list(pred), list(labels), parts),
        "cat_miou": cat_miou(pred, labels, spec.num_parts),
    }


def _instance_parts(ds: Dataset, cloud) -> list:
    """Part ids of the cloud's category (labels are per-category local ids)."""
    if ds.part_names and cloud.class_label is not None:
        name = ds.class_names[cloud.class_label]
        if name in ds.part_names:
            return list(range(len(ds.part_names[name])))
    return sorted(set(cloud.per_point_labels.tolist()))


# ----------------------------------------------------------------- training
@dataclass
class FitResult:
    weights: Weights
    best_weights: Weights
    history: list = field(default_factory=list)
    best_metric: float = float("nan")
    initial_loss: float = float("nan")


def _metric_name(spec: ModelSpec) -> str:
    return "accuracy" if spec.task == "classification" else "ins_miou"


def fit(train: Dataset, spec: ModelSpec, config: TrainConfig, test: Optional[Dataset] = None,
        out_dir: Optional[str] = None, weights: Optional[Weights] = None, measure_initial: bool = False,
        progress=None) -> FitResult:
    """Train a model with AdamW and cosine annealing.

    Deterministic for a fixed seed: shuffling, dropout and the random distant
    neighbor draws all come from one seeded generator.

    Args:
        train: Training split.
        spec: Model specification; its dropout is overridden by the config.
        config: Optimizer and loop settings.
        test: Optional evaluation split, scored after every epoch.
        out_dir: If given, ``train_log.csv``, ``last.heaw`` and ``best.heaw``
            are written there.
        weights: Optional starting weights (otherwise seeded init).
        measure_initial: Also record the eval-mode training loss before the
            first update in ``FitResult.initial_loss``.
        progress: Optional callable receiving each history row.
    """
    if config.task != spec.task:
        raise ConfigError(f"config task {config.task!r} does not match model task {spec.task!r}")
    if len(train) == 0:
        raise DataError("training split is empty")
    if test is not None and len(test) == 0:
        raise DataError("evaluation split is empty")
    spec = dataclasses.replace(spec, dropout=config.dropout)
    pts, labels = _arrays(train, spec)
    w = weights if weights is not None else init_weights(spec, config.seed)
    params = w.trainable()
    state = AdamWState.for_params(params, config.beta1, config.beta2, config.eps)
    rng = np.random.default_rng(config.seed)

    static_knn = config.jitter == 0.0
    train_nbr = _level0_knn(pts, spec.k) if static_knn else None
    test_nbr = _level0_knn(_arrays(test, spec)[0], spec.k) if test is not None else None

    result = FitResult(w, w.copy())
    if measure_initial:
        result.initial_loss = evaluate(w, train, spec, config.batch, train_nbr)["loss"]

    n = len(pts)
    steps_per_epoch = math.ceil(n / config.batch)
    total_steps = config.epochs * steps_per_epoch
    best = -np.inf
    metric = _metric_name(spec)
    writer = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        log_fh = open(os.path.join(out_dir, "train_log.csv"), "w", newline="")
        writer = csv.writer(log_fh, lineterminator="\n")
        writer.writerow(["epoch", "lr", "train_loss", "eval_metric"])
    step = 0
    try:
        for epoch in range(config.epochs):
            order = rng.permutation(n)
            lr = cosine_lr(epoch, config.epochs, config.lr_init, config.lr_final)
            losses = []
            for b in range(steps_per_epoch):
                sel = order[b * config.batch : (b + 1) * config.batch]
                batch_pts = pts[sel]
                kwargs = {}
                if config.jitter > 0 or config.rotate:
                    batch_pts = augment(batch_pts, rng, config.jitter, config.rotate)
                if static_knn:
                    kwargs["local_index"] = train_nbr[sel]
                if config.schedule == "step":
                    lr = cosine_lr(step, total_steps, config.lr_init, config.lr_final)
                w.zero_grad()
                out = forward(batch_pts, spec, w, training=True, rng=rng, **kwargs)
                loss = cross_entropy(out.logits, labels[sel])
                value = float(loss.data)
                if not np.isfinite(value):
                    raise TrainingDiverged(f"non-finite loss {value} at epoch {epoch}, step {step}")
                loss.backward()
                grads = [p.grad for p in params]
                for p, g in zip(params, grads):
                    if g is not None and not np.all(np.isfinite(g)):
                        raise TrainingDiverged(f"non-finite gradient for {p.name} at epoch {epoch}, step {step}")
                adamw_step(params, grads, state, lr, config.weight_decay)
                losses.append(value * len(sel))
                step += 1
            train_loss = float(np.sum(losses) / n)
            eval_metric = float("nan")
            if test is not None:
                eval_metric = evaluate(w, test, spec, config.batch, test_nbr)[metric]
                if eval_metric > best:
                    best = eval_metric
                    result.best_weights = w.copy()
                    if out_dir is not None:
                        save_weights(w, os.path.join(out_dir, "best.heaw"))
            row = {"epoch": epoch + 1, "lr": lr, "train_loss": train_loss, "eval_metric": eval_metric}
            result.history.append(row)
            if writer is not None:
                writer.writerow([row["epoch"], repr(lr), repr(train_loss), repr(eval_metric)])
                log_fh.flush()
            if progress is not None:
                progress(row)
            logger.info("epoch %d lr %.3g loss %.4f %s %.4f", epoch + 1, lr, train_loss, metric, eval_metric)
    finally:
        if writer is not None:
            log_fh.close()
    if out_dir is not None:
        save_weights(w, os.path.join(out_dir, "last.heaw"))
    result.best_metric = float(best) if test is not None else float("nan")
    if test is None:
        result.best_weights = w.copy()
    return result
