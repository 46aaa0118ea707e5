"""One-call point cloud sampling with the attention samplers and the baselines.

Attention samplers score points on features from the neighborhood
embedding: ``embed -> {global | local | gld} scores -> top-M``. Weights come
from a checkpoint (names ``embed.*``, ``stage1.global.*``,
``stage1.local.*``) or, in *frozen random* mode, from a seeded untrained
initialization, which lets the samplers run without any training.
"""

from __future__ import annotations

from typing import Optional

import numpy as np

from . import ndtensor as nd
from .downsample import (
    Projections,
    SampleSelection,
    fps,
    global_attention,
    global_downsample,
    global_local_downsample,
    init_projections,
    local_attention,
    local_downsample,
    random_sample,
    top_m,
    voxel_sample,
)
from .exceptions import ArgumentError, ConfigError
from .ndtensor import Tensor
from .neighbors import embed, init_embed, knn
from .weights import Weights

ATTENTION_METHODS = ("global", "local", "gld")
BASELINE_METHODS = ("rs", "fps", "voxel")
METHODS = ATTENTION_METHODS + BASELINE_METHODS

FROZEN_WIDTH = 64
FROZEN_HIDDEN = 16


def init_sampler_weights(seed: int = 0, width: int = FROZEN_WIDTH, hidden: int = FROZEN_HIDDEN) -> Weights:
    """Seeded untrained embedding and first-stage projections."""
    rng = np.random.default_rng(seed)
    w = Weights()
    init_embed(w, rng, "embed", 3, hidden, width)
    init_projections(w, rng, "stage1.global", width)
    init_projections(w, rng, "stage1.local", width)
    return w


def attention_scores(points, method: str, k: int, weights: Weights, rng: np.random.Generator,
                     fusion: str = "shared_index", embed_k: Optional[int] = None,
                     embed_variant: str = "diff", use_global: bool = True) -> np.ndarray:
    """Per-point selection scores of shape (B, N) for a batch of clouds (B, N, 3).

    Args:
        k: Neighborhood size of the local sampler.
        embed_k: Neighborhood size of the embedding (defaults to ``k``).
        rng: Source of the embedding's random distant draws.
    """
    if method not in ATTENTION_METHODS:
        raise ConfigError(f"unknown attention method {method!r}; choose from {ATTENTION_METHODS}")
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim == 2:
        pts = pts[None]
    n = pts.shape[1]
    dtype = next(iter(weights.params.values())).dtype
    embed_k = min(embed_k or k, n - 1)
    k = min(k, n - 1)
    with nd.no_grad():
        nbr = knn(pts, embed_k).idx
        feats = embed(Tensor(np.transpose(pts, (0, 2, 1)).astype(dtype)), weights, embed_k, rng,
                      variant=embed_variant, use_global=use_global, local_index=nbr)
        local_nbr = nbr if k == embed_k else None
        if method == "global":
            _, sel = global_downsample(feats, 1, Projections.from_weights(weights, "stage1.global"))
        elif method == "local":
            _, sel = local_downsample(feats, pts, 1, k, Projections.from_weights(weights, "stage1.local"), local_nbr)
        else:
            _, sel = global_local_downsample(feats, pts, 1, k, Projections.from_weights(weights, "stage1.global"),
                                             Projections.from_weights(weights, "stage1.local"), fusion, local_nbr)
    return sel.scores


def _zscore_tensor(s: Tensor) -> Tensor:
    # statistics are held constant: the gradient only reorders points
    mu = s.data.mean(axis=-1, keepdims=True)
    sd = s.data.std(axis=-1, keepdims=True)
    inv = np.where(sd > 0, 1.0 / np.where(sd > 0, sd, 1.0), 0.0)
    return nd.mul(nd.sub(s, Tensor(mu.astype(s.dtype))), Tensor(inv.astype(s.dtype)))


def score_tensor(points, method: str, k: int, weights, rng: np.random.Generator, nbr=None,
                 embed_variant: str = "diff", use_global: bool = True) -> Tensor:
    """Differentiable (B, N) selection scores (the shared-index fusion for ``gld``).

    Same quantities as :func:`attention_scores`, but built on the tape so a
    downstream loss can train the sampler weights.
    """
    if method not in ATTENTION_METHODS:
        raise ConfigError(f"unknown attention method {method!r}; choose from {ATTENTION_METHODS}")
    pts = np.asarray(points, dtype=np.float64)
    dtype = next(iter(weights.params.values())).dtype
    k = min(k, pts.shape[1] - 1)
    nbr = knn(pts, k).idx if nbr is None else nbr
    feats = embed(Tensor(np.transpose(pts, (0, 2, 1)).astype(dtype)), weights, k, rng,
                  variant=embed_variant, use_global=use_global, local_index=nbr)
    xt = nd.transpose(feats, (0, 2, 1))
    parts = []
    if method in ("global", "gld"):
        attn, _ = global_attention(xt, Projections.from_weights(weights, "stage1.global"))
        parts.append(nd.sum(attn, axis=-2))
    if method in ("local", "gld"):
        attn, _ = local_attention(xt, nbr, Projections.from_weights(weights, "stage1.local"))
        parts.append(nd.std(attn, axis=-1))
    if len(parts) == 1:
        return parts[0]
    return nd.add(_zscore_tensor(parts[0]), _zscore_tensor(parts[1]))


def sample(points, method: str, m: int, k: int = 16, seed: int = 0, weights: Optional[Weights] = None,
           fusion: str = "shared_index", embed_k: Optional[int] = None) -> SampleSelection:
    """Select ``m`` of the ``N`` points of one cloud.

    Args:
        points: Coordinates (N, 3).
        method: One of ``global``, ``local``, ``gld``, ``rs``, ``fps``,
            ``voxel``.
        seed: Seeds random sampling, the FPS start point, the embedding's
            random distant draws and, without ``weights``, the frozen random
            projections.
        weights: Trained weights; ``None`` selects frozen random mode.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ArgumentError(f"expected (N, 3) points, got {pts.shape}")
    n = pts.shape[0]
    if not 1 <= m <= n:
        raise ArgumentError(f"m={m} must lie in [1, N={n}]")
    rng = np.random.default_rng(seed)
    if method == "rs":
        return random_sample(pts, m, rng)
    if method == "fps":
        return fps(pts, m, int(rng.integers(n)))
    if method == "voxel":
        return voxel_sample(pts, m)
    if method not in ATTENTION_METHODS:
        raise ConfigError(f"unknown method {method!r}; choose from {', '.join(METHODS)}")
    if n < 3:
        raise ArgumentError("attention samplers need at least 3 points")
    w = weights if weights is not None else init_sampler_weights(seed)
    scores = attention_scores(pts, method, k, w, rng, fusion, embed_k)[0]
    return SampleSelection(top_m(scores, m), scores, method)
