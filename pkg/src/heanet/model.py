"""Hierarchical edge-aware classification and segmentation networks.

Both tasks share an encoder::

    embed -> [global-local downsample -> transformer block] x stages

Classification max-pools the coarsest features and applies three fully
connected layers (dropout after the first two). Segmentation walks back up
the hierarchy with inverse-distance 3-NN interpolation, concatenating encoder
features at the two resolutions just finer than the coarsest one, and
classifies every input point.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from typing import List, Optional, Sequence

import numpy as np

from . import ndtensor as nd
from .attention import init_transformer, transformer_attention
from .downsample import Projections, SampleSelection, _gld_cl, init_projections
from .exceptions import ConfigError, DimensionError
from .ndtensor import Tensor
from .neighbors import _as_batched_index, _sqdist, embed, init_embed, knn, smallest_k
from .weights import Weights, add_batchnorm, add_linear

TASKS = ("classification", "segmentation")


@dataclass
class ModelSpec:
    task: str = "classification"
    n_points: int = 1024
    stages: tuple = (1024, 512, 256, 128)
    k: int = 32
    width: int = 128
    embed_hidden: int = 64
    heads: int = 4
    num_classes: int = 40
    num_parts: int = 50
    dropout: float = 0.5
    fusion: str = "shared_index"
    memory: str = "self"
    residual: bool = True
    embed_variant: str = "diff"
    use_global: bool = True
    head_widths: tuple = (512, 256)
    eval_seed: int = 0
    decoder_norm: bool = True

    def __post_init__(self):
        self.stages = tuple(int(s) for s in self.stages)
        self.head_widths = tuple(int(s) for s in self.head_widths)
        self.validate()

    def validate(self) -> None:
        problems = []
        if self.task not in TASKS:
            problems.append(f"task must be one of {TASKS}, got {self.task!r}")
        if len(self.stages) < 2:
            problems.append("stages needs the input size and at least one downsampled size")
        if any(b >= a for a, b in zip(self.stages, self.stages[1:])):
            problems.append(f"stages must be strictly decreasing, got {self.stages}")
        if self.stages and self.stages[0] != self.n_points:
            problems.append(f"first stage {self.stages[0]} must equal n_points {self.n_points}")
        if self.stages and min(self.stages) < 1:
            problems.append("stage sizes must be positive")
        if self.k < 1:
            problems.append("k must be >= 1")
        if self.width < 1 or self.heads < 1 or self.width % self.heads:
            problems.append(f"width {self.width} must be a positive multiple of heads {self.heads}")
        if self.num_classes < 1 or self.num_parts < 1:
            problems.append("class and part counts must be positive")
        if not 0.0 <= self.dropout < 1.0:
            problems.append("dropout must lie in [0, 1)")
        if self.fusion not in ("shared_index", "independent_sum"):
            problems.append(f"unknown fusion {self.fusion!r}")
        if self.memory not in ("self", "stage_input"):
            problems.append(f"unknown memory source {self.memory!r}")
        if self.embed_variant not in ("diff", "neighbor"):
            problems.append(f"unknown embed variant {self.embed_variant!r}")
        if problems:
            raise ConfigError("; ".join(problems))

    @property
    def n_stages(self) -> int:
        return len(self.stages) - 1

    def skip_levels(self) -> tuple:
        top = self.n_stages
        return tuple(level for level in (top - 1, top - 2) if level >= 0)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown model spec key(s): {', '.join(unknown)}")
        return cls(**d)


@dataclass
class ForwardResult:
    logits: Tensor
    selections: List[SampleSelection] = field(default_factory=list)
    absolute_indices: List[np.ndarray] = field(default_factory=list)
    coords: List[np.ndarray] = field(default_factory=list)


# -------------------------------------------------------------- construction
def init_weights(spec: ModelSpec, seed: int = 0, dtype=np.float32) -> Weights:
    """Seeded fan-in uniform initialization of every parameter the spec needs."""
    rng = np.random.default_rng(seed)
    w = Weights()
    D = spec.width
    init_embed(w, rng, "embed", 3, spec.embed_hidden, D, dtype)
    for s in range(1, spec.n_stages + 1):
        init_projections(w, rng, f"stage{s}.global", D, dtype=dtype)
        init_projections(w, rng, f"stage{s}.local", D, dtype=dtype)
        init_transformer(w, rng, f"stage{s}.attn", D, spec.heads, dtype)
    if spec.task == "classification":
        widths = (D,) + spec.head_widths
        for i in range(len(spec.head_widths)):
            add_linear(w, rng, f"head.fc{i}", widths[i], widths[i + 1], dtype=dtype)
        add_linear(w, rng, f"head.fc{len(spec.head_widths)}", widths[-1], spec.num_classes, relu=False, dtype=dtype)
    else:
        skips = spec.skip_levels()
        for level in range(spec.n_stages - 1, -1, -1):
            fan_in = D * (2 if level in skips else 1)
            add_linear(w, rng, f"decoder.level{level}", fan_in, D, dtype=dtype)
            if spec.decoder_norm:
                add_batchnorm(w, f"decoder.level{level}.bn", D, dtype)
        add_linear(w, rng, "seg.fc0", D, D, dtype=dtype)
        if spec.decoder_norm:
            add_batchnorm(w, "seg.fc0.bn", D, dtype)
        add_linear(w, rng, "seg.fc1", D, spec.num_parts, relu=False, dtype=dtype)
    return w


# ----------------------------------------------------------------- upsample
def interpolation_matrix(coords_coarse: np.ndarray, coords_fine: np.ndarray, k: int = 3, eps: float = 1e-8):
    """Dense (…, N_fine, M) inverse-distance weights over the k nearest coarse points."""
    cc = np.asarray(coords_coarse, dtype=np.float64)
    cf = np.asarray(coords_fine, dtype=np.float64)
    d2 = _sqdist(cf[..., :, None, :], cc[..., None, :, :])
    kk = min(k, cc.shape[-2])
    nearest = smallest_k(d2, kk)
    dist = np.sqrt(np.take_along_axis(d2, nearest, axis=-1))
    inv = 1.0 / (dist + eps)
    inv = inv / inv.sum(axis=-1, keepdims=True)
    mat = np.zeros(d2.shape)
    np.put_along_axis(mat, nearest, inv, axis=-1)
    return mat


def upsample(features_coarse, coords_coarse, coords_fine, k: int = 3, eps: float = 1e-8) -> Tensor:
    """Interpolate (…, M, D) coarse features onto fine coordinates, giving (…, N, D)."""
    feats = nd.as_tensor(features_coarse)
    cc = np.asarray(coords_coarse)
    if cc.shape[-2] < 1:
        raise DimensionError("upsample needs at least one coarse point")
    if feats.shape[-2] != cc.shape[-2]:
        raise DimensionError(f"features {feats.shape} do not match coarse coordinates {cc.shape}")
    mat = interpolation_matrix(cc, coords_fine, k, eps).astype(feats.dtype)
    return Tensor(mat) @ feats


# ------------------------------------------------------------------ forward
def _check_points(points, spec: ModelSpec) -> np.ndarray:
    pts = np.asarray(points)
    if pts.ndim == 2:
        pts = pts[None]
    if pts.ndim != 3 or pts.shape[2] != 3:
        raise DimensionError(f"expected (B, N, 3) points, got {pts.shape}")
    if pts.shape[1] != spec.n_points:
        raise DimensionError(f"model expects N={spec.n_points} points, got {pts.shape[1]}")
    return pts


def encode(points, spec: ModelSpec, w: Weights, training: bool = False, rng: Optional[np.random.Generator] = None,
           global_index=None, local_index=None, dtype=None):
    """Run the shared encoder.

    Returns:
        ``(levels, result)`` where ``levels`` lists channel-last features for
        every resolution (embedding first) and ``result`` carries the stage
        selections, absolute indices and coordinates (logits unset).
    """
    pts = _check_points(points, spec)
    dtype = dtype or next(iter(w.params.values())).dtype
    if rng is None:
        rng = np.random.default_rng(spec.eval_seed)
    pcd = Tensor(np.transpose(pts, (0, 2, 1)).astype(dtype))
    if local_index is None:
        local_index = knn(pts, spec.k)
    local_index = _as_batched_index(local_index, pts.shape[0], pts.shape[1])
    feats = embed(pcd, w, spec.k, rng, variant=spec.embed_variant, use_global=spec.use_global,
                  local_index=local_index, global_index=global_index, channel_last=True)
    coords = pts.astype(np.float64)
    absolute = np.broadcast_to(np.arange(pts.shape[1]), pts.shape[:2])
    result = ForwardResult(logits=None, coords=[coords])
    levels = [feats]
    for s in range(1, spec.n_stages + 1):
        n_prev = coords.shape[1]
        m = spec.stages[s]
        k = min(spec.k, n_prev - 1)
        # the first stage sees the input cloud, whose neighbor table is already known
        nbr = local_index if s == 1 and local_index.shape[-1] == k else None
        out, sel = _gld_cl(feats, coords, m, k, Projections.from_weights(w, f"stage{s}.global"),
                           Projections.from_weights(w, f"stage{s}.local"), spec.fusion, nbr)
        if spec.residual:
            out = out + nd.index_points(feats, sel.idx)
        memory = None if spec.memory == "self" else nd.transpose(feats, (0, 2, 1))
        x = transformer_attention(nd.transpose(out, (0, 2, 1)), w, f"stage{s}.attn", spec.heads, memory, training)
        feats = nd.transpose(x, (0, 2, 1))
        coords = np.take_along_axis(coords, sel.idx[..., None], axis=1)
        absolute = np.take_along_axis(absolute, sel.idx, axis=1)
        result.selections.append(sel)
        result.absolute_indices.append(absolute)
        result.coords.append(coords)
        levels.append(feats)
    return levels, result


def forward_classify(points, spec: ModelSpec, w: Weights, training: bool = False,
                     rng: Optional[np.random.Generator] = None, **kwargs) -> ForwardResult:
    """Class logits of shape (B, num_classes) plus per-stage selections."""
    if spec.task != "classification":
        raise ConfigError("forward_classify needs a classification spec")
    levels, result = encode(points, spec, w, training, rng, **kwargs)
    h = nd.max(levels[-1], axis=1)
    n_hidden = len(spec.head_widths)
    for i in range(n_hidden):
        h = nd.relu(nd.linear(h, w[f"head.fc{i}.weight"], w[f"head.fc{i}.bias"]))
        h = nd.dropout(h, spec.dropout, training, rng)
    result.logits = nd.linear(h, w[f"head.fc{n_hidden}.weight"], w[f"head.fc{n_hidden}.bias"])
    return result


def _pointwise(x: Tensor, w: Weights, name: str, norm: bool, training: bool) -> Tensor:
    """Shared linear layer over (B, N, C) features, optionally batch-normalized, then ReLU."""
    h = nd.linear(x, w[f"{name}.weight"], w[f"{name}.bias"])
    if norm:
        B, N, C = h.shape
        h = nd.reshape(nd.batchnorm(nd.reshape(h, (B * N, C)), w[f"{name}.bn.gamma"], w[f"{name}.bn.beta"],
                                    w.buffer(f"{name}.bn.running_mean"), w.buffer(f"{name}.bn.running_var"),
                                    training), (B, N, C))
    return nd.relu(h)


def forward_segment(points, spec: ModelSpec, w: Weights, training: bool = False,
                    rng: Optional[np.random.Generator] = None, **kwargs) -> ForwardResult:
    """Per-point part logits of shape (B, num_parts, N) plus per-stage selections."""
    if spec.task != "segmentation":
        raise ConfigError("forward_segment needs a segmentation spec")
    levels, result = encode(points, spec, w, training, rng, **kwargs)
    skips = spec.skip_levels()
    x = levels[-1]
    for level in range(spec.n_stages - 1, -1, -1):
        up = upsample(x, result.coords[level + 1], result.coords[level])
        if level in skips:
            up = nd.concat([up, levels[level]], axis=2)
        x = _pointwise(up, w, f"decoder.level{level}", spec.decoder_norm, training)
    h = _pointwise(x, w, "seg.fc0", spec.decoder_norm, training)
    logits = nd.linear(h, w["seg.fc1.weight"], w["seg.fc1.bias"])
    result.logits = nd.transpose(logits, (0, 2, 1))
    return result


def forward(points, spec: ModelSpec, w: Weights, training: bool = False, rng=None, **kwargs) -> ForwardResult:
    fn = forward_classify if spec.task == "classification" else forward_segment
    return fn(points, spec, w, training, rng, **kwargs)


def predict(points, spec: ModelSpec, w: Weights, batch_size: int = 16) -> np.ndarray:
    """Eval-mode argmax labels: (B,) for classification, (B, N) for segmentation."""
    pts = _check_points(points, spec)
    out = []
    with nd.no_grad():
        for start in range(0, len(pts), batch_size):
            logits = forward(pts[start : start + batch_size], spec, w).logits.data
            out.append(np.argmax(logits, axis=1))
    return np.concatenate(out)


def spec_for_weights(spec: ModelSpec, dtype=np.float32) -> Weights:
    """Template used to validate weight files against a spec."""
    return init_weights(spec, 0, dtype)


def stage_sizes(n_points: int, n_stages: int) -> Sequence[int]:
    """Halving plan, e.g. 1024 -> (1024, 512, 256, 128) for three stages."""
    return tuple(n_points // (2**i) for i in range(n_stages + 1))
