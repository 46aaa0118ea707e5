"""Sampler benchmark: task accuracy of a fixed classifier on sampled clouds.

Protocol: a small PointNet-style classifier (shared per-point MLP, max-pool,
fully connected head) is trained once on full-resolution training clouds.
Each sampler then reduces every test cloud to ``M`` points and the frozen
classifier's accuracy on the reduced clouds is recorded. Results are means
over several seeds (sampler randomness: random keys, FPS start point,
the embedding's distant-point draws, frozen random weights).

Method names:

``rs``, ``fps``, ``voxel``
    Classical baselines.
``gld-frozen``
    Global-local attention sampler with seeded untrained weights.
``gld-trained`` (alias ``gld``)
    The same sampler starting from a trained checkpoint's embedding and
    first-stage projections, then adapted to the frozen task network on the
    training split (the usual learn-to-sample protocol; see
    :func:`adapt_sampler`).
``global-*`` / ``local-*``
    The two attention halves on their own, frozen or trained.
"""

from __future__ import annotations

import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import ndtensor as nd
from .downsample import fps, top_m, voxel_sample
from .exceptions import ArgumentError, ConfigError
from .metrics import accuracy, format_table, to_csv
from .ndtensor import Tensor
from .pcio import Dataset
from .neighbors import knn
from .sampling import attention_scores, init_sampler_weights, score_tensor
from .train import AdamWState, adamw_step, cosine_lr, cross_entropy
from .weights import Weights, add_linear

logger = logging.getLogger(__name__)

BASELINES = ("rs", "fps", "voxel")
ATTENTION = tuple(f"{m}-{mode}" for m in ("gld", "global", "local") for mode in ("frozen", "trained"))
ALIASES = {"gld": "gld-trained", "global": "global-trained", "local": "local-trained"}


def canonical_method(name: str) -> str:
    name = ALIASES.get(name, name)
    if name not in BASELINES + ATTENTION:
        raise ConfigError(f"unknown benchmark method {name!r}; choose from {', '.join(BASELINES + ATTENTION)}")
    return name


# -------------------------------------------------------------- task network
@dataclass
class TaskNetConfig:
    widths: tuple = (64, 128)
    head: tuple = (64,)
    epochs: int = 40
    batch: int = 32
    lr: float = 1e-3
    weight_decay: float = 1e-5
    seed: int = 0


def init_tasknet(num_classes: int, config: TaskNetConfig) -> Weights:
    rng = np.random.default_rng(config.seed)
    w = Weights()
    widths = (3,) + tuple(config.widths)
    for i in range(len(config.widths)):
        add_linear(w, rng, f"point.{i}", widths[i], widths[i + 1])
    head = (widths[-1],) + tuple(config.head)
    for i in range(len(config.head)):
        add_linear(w, rng, f"head.{i}", head[i], head[i + 1])
    add_linear(w, rng, f"head.{len(config.head)}", head[-1], num_classes, relu=False)
    return w


def tasknet_forward(points, w: Weights, config: TaskNetConfig, gate: Optional[Tensor] = None) -> Tensor:
    """Logits (B, classes) for clouds (B, M, 3); any M works (max-pooling).

    ``gate`` (B, M) in [0, 1] scales each point's features before pooling.
    """
    h = Tensor(np.asarray(points, dtype=np.float32))
    for i in range(len(config.widths)):
        h = nd.relu(nd.linear(h, w[f"point.{i}.weight"], w[f"point.{i}.bias"]))
    if gate is not None:
        h = nd.mul(h, nd.reshape(gate, gate.shape + (1,)))
    h = nd.max(h, axis=1)
    for i in range(len(config.head)):
        h = nd.relu(nd.linear(h, w[f"head.{i}.weight"], w[f"head.{i}.bias"]))
    last = len(config.head)
    return nd.linear(h, w[f"head.{last}.weight"], w[f"head.{last}.bias"])


def train_tasknet(train: Dataset, config: TaskNetConfig = TaskNetConfig()) -> Weights:
    pts, labels, _ = train.stack()
    if labels is None:
        raise ArgumentError("task network training needs class labels")
    w = init_tasknet(len(train.class_names), config)
    params = w.trainable()
    state = AdamWState.for_params(params)
    rng = np.random.default_rng(config.seed)
    n = len(pts)
    for _ in range(config.epochs):
        order = rng.permutation(n)
        for s in range(0, n, config.batch):
            sel = order[s : s + config.batch]
            w.zero_grad()
            loss = cross_entropy(tasknet_forward(pts[sel], w, config), labels[sel])
            loss.backward()
            adamw_step(params, [p.grad for p in params], state, config.lr, config.weight_decay)
    return w


def tasknet_predict(points, w: Weights, config: TaskNetConfig) -> np.ndarray:
    with nd.no_grad():
        return np.argmax(tasknet_forward(points, w, config).data, axis=1)


# -------------------------------------------------------- sampler adaptation
@dataclass
class AdaptConfig:
    epochs: int = 10
    batch: int = 16
    lr_init: float = 1e-3
    lr_final: float = 1e-5
    weight_decay: float = 1e-5
    temperature: float = 0.5
    seed: int = 0


SAMPLER_PREFIXES = ("embed.", "stage1.global.", "stage1.local.")


def sampler_subset(weights: Weights) -> Weights:
    """Trainable copy of the sampler weights (embedding + first-stage projections)."""
    names = [n for n in weights if n.startswith(SAMPLER_PREFIXES)]
    if not names:
        raise ArgumentError("weights hold no sampler parameters (embed.*, stage1.global.*, stage1.local.*)")
    out = Weights()
    for n in names:
        out.add(n, weights[n].data.copy())
    return out


def gated_logits(points, scores: Tensor, m: int, net: Weights, config: TaskNetConfig, temperature: float) -> Tensor:
    """Task logits with every point gated by ``sigmoid((score - tau) / T)``.

    ``tau`` sits halfway between the M-th and (M+1)-th largest score, so the
    gate is a smooth stand-in for the hard top-M selection and the task loss
    reaches the scores of points on both sides of the cut.
    """
    ranked = -np.sort(-scores.data, axis=-1)
    n = ranked.shape[-1]
    tau = ranked[:, m - 1] if m == n else 0.5 * (ranked[:, m - 1] + ranked[:, m])
    shift = nd.sub(scores, Tensor(tau[:, None].astype(scores.dtype)))
    return tasknet_forward(points, net, config, gate=nd.sigmoid(nd.scale(shift, 1.0 / temperature)))


def adapt_sampler(train: Dataset, net: Weights, net_config: TaskNetConfig, weights: Weights, m_list: Sequence[int],
                  method: str = "gld", k: int = 16, spec=None, config: AdaptConfig = AdaptConfig()) -> Weights:
    """Fine-tune sampler weights against the frozen task network.

    Each step draws a sample count from ``m_list``, scores the training clouds
    and minimizes the task loss of the gated clouds. Only the sampler
    weights change.
    """
    w = sampler_subset(weights)
    params = w.trainable()
    state = AdamWState.for_params(params)
    rng = np.random.default_rng(config.seed)
    pts, labels, _ = train.stack()
    variant, use_global = (spec.embed_variant, spec.use_global) if spec is not None else ("diff", True)
    nbr = knn(pts, min(k, pts.shape[1] - 1)).idx
    frozen = [(p, p.requires_grad) for p in net.params.values()]
    for p, _ in frozen:
        p.requires_grad = False
    try:
        for epoch in range(config.epochs):
            lr = cosine_lr(epoch, config.epochs, config.lr_init, config.lr_final)
            order = rng.permutation(len(pts))
            for s in range(0, len(pts), config.batch):
                sel = order[s : s + config.batch]
                m = int(m_list[rng.integers(len(m_list))])
                w.zero_grad()
                scores = score_tensor(pts[sel], method, k, w, rng, nbr[sel], variant, use_global)
                loss = cross_entropy(gated_logits(pts[sel], scores, m, net, net_config, config.temperature),
                                     labels[sel])
                loss.backward()
                adamw_step(params, [p.grad for p in params], state, lr, config.weight_decay)
            logger.info("sampler adaptation epoch %d loss %.4f", epoch + 1, float(loss.data))
    finally:
        for p, flag in frozen:
            p.requires_grad = flag
    return w


# ----------------------------------------------------------------- samplers
def _orders(method: str, pts: np.ndarray, m_max: int, seed: int, trained: Optional[Weights], spec) -> np.ndarray:
    """(B, m_max) selection orders; every method here is prefix-consistent,
    so the first M entries are the method's M-point selection.
    """
    rng = np.random.default_rng(seed)
    B, n, _ = pts.shape
    if method == "rs":
        return top_m(rng.random((B, n)), m_max)
    if method == "fps":
        starts = rng.integers(n, size=B)
        return np.stack([fps(p, m_max, int(s)).idx for p, s in zip(pts, starts)])
    kind, mode = method.split("-")
    if mode == "trained":
        if trained is None:
            raise ArgumentError(f"method {method!r} needs --weights")
        w, k, embed_k, fusion = trained, spec.k, spec.k, spec.fusion
        variant, use_global = spec.embed_variant, spec.use_global
    else:
        w, k, embed_k, fusion = init_sampler_weights(seed), 16, 16, "shared_index"
        variant, use_global = "diff", True
    scores = attention_scores(pts, kind, k, w, rng, fusion, embed_k, variant, use_global)
    return top_m(scores, m_max)


@dataclass
class BenchmarkResult:
    methods: List[str]
    m_list: List[int]
    mean: np.ndarray
    std: np.ndarray
    seeds: int
    full_accuracy: float
    seconds: float = 0.0
    per_seed: Dict[str, np.ndarray] = field(default_factory=dict)

    def rows(self):
        return [[m] + [float(v) for v in self.mean[i]] for i, m in enumerate(self.methods)]

    def header(self):
        return ["method"] + [f"M={m}" for m in self.m_list]

    def table(self) -> str:
        return format_table(self.rows(), self.header())

    def csv(self, path=None) -> str:
        rows = []
        for i, method in enumerate(self.methods):
            for j, m in enumerate(self.m_list):
                rows.append([method, m, float(self.mean[i, j]), float(self.std[i, j]), self.seeds])
        return to_csv(rows, ["method", "m", "accuracy_mean", "accuracy_std", "seeds"], path)


def run_benchmark(train: Dataset, test: Dataset, methods: Sequence[str], m_list: Sequence[int], seeds: int = 20,
                  weights: Optional[Weights] = None, spec=None, tasknet: TaskNetConfig = TaskNetConfig(),
                  adapt: Optional[AdaptConfig] = AdaptConfig(), threads: Optional[int] = None) -> BenchmarkResult:
    """Accuracy of the frozen task network on clouds sampled by each method.

    Args:
        train: Split used to fit the task network on full clouds.
        test: Split whose clouds are sampled and classified.
        methods: Benchmark method names (see module docstring).
        m_list: Sample counts M.
        seeds: Number of sampler seeds averaged.
        weights, spec: Trained checkpoint for the ``*-trained`` methods.
        adapt: Sampler adaptation settings for the ``*-trained`` methods;
            ``None`` uses the checkpoint weights unchanged.
        threads: Worker threads across methods (default ``HEA_THREADS`` or 1);
            results are assembled in a fixed order, so output is identical.
    """
    start = time.perf_counter()
    methods = [canonical_method(m) for m in methods]
    m_list = [int(m) for m in m_list]
    pts, labels, _ = test.stack()
    n = pts.shape[1]
    bad = [m for m in m_list if not 1 <= m <= n]
    if bad:
        raise ArgumentError(f"sample counts {bad} outside [1, N={n}]")
    if seeds < 1:
        raise ArgumentError("seeds must be >= 1")
    if any(m.endswith("-trained") for m in methods) and weights is None:
        raise ArgumentError("trained attention methods need --weights")
    net = train_tasknet(train, tasknet)
    full = accuracy(tasknet_predict(pts, net, tasknet), labels)
    m_max = max(m_list)
    trained = {}
    for method in methods:
        kind, _, mode = method.partition("-")
        if mode == "trained" and kind not in trained:
            k = spec.k if spec is not None else 16
            trained[kind] = weights if adapt is None else adapt_sampler(
                train, net, tasknet, weights, m_list, kind, k, spec, adapt)

    def evaluate(method: str) -> np.ndarray:
        acc = np.zeros((seeds, len(m_list)))
        if method == "voxel":
            # deterministic: one evaluation serves every seed
            for j, m in enumerate(m_list):
                idx = np.stack([voxel_sample(p, m).idx for p in pts])
                acc[:, j] = accuracy(tasknet_predict(np.take_along_axis(pts, idx[..., None], 1), net, tasknet), labels)
            return acc
        for s in range(seeds):
            order = _orders(method, pts, m_max, s, trained.get(method.partition("-")[0]), spec)
            for j, m in enumerate(m_list):
                sub = np.take_along_axis(pts, order[:, :m, None], axis=1)
                acc[s, j] = accuracy(tasknet_predict(sub, net, tasknet), labels)
        return acc

    workers = threads or int(os.environ.get("HEA_THREADS", "1") or 1)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(evaluate, methods))
    else:
        results = [evaluate(m) for m in methods]
    per_seed = dict(zip(methods, results))
    mean = np.stack([r.mean(axis=0) for r in results])
    std = np.stack([r.std(axis=0) for r in results])
    return BenchmarkResult(methods, m_list, mean, std, seeds, full, time.perf_counter() - start, per_seed)


def directional_check(result: BenchmarkResult, better: str = "gld-trained", baseline: str = "rs") -> bool:
    """True if ``better`` is at least as accurate as ``baseline`` at every M."""
    i, j = result.methods.index(better), result.methods.index(baseline)
    return bool(np.all(result.mean[i] >= result.mean[j]))
