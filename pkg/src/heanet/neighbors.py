"""Neighborhood tables and the local/global neighborhood embedding.

Index tables are plain integer arrays of shape (N, K) or (B, N, K). Feature
tensors follow the (B, C, N) layout at the public surface.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Mapping, Optional

import numpy as np
from scipy.spatial import cKDTree

from . import ndtensor as nd
from .exceptions import ConfigError, DimensionError
from .ndtensor import Tensor
from .weights import Weights, add_linear

logger = logging.getLogger(__name__)


@dataclass
class NeighborIndex:
    idx: np.ndarray
    mode: str = "knn"

    @property
    def k(self) -> int:
        return self.idx.shape[-1]


def _sqdist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # fixed summation order so every code path produces identical values
    out = a[..., 0] - b[..., 0]
    out = out * out
    for j in range(1, a.shape[-1]):
        d = a[..., j] - b[..., j]
        out += d * d
    return out


def _clamp_k(k: int, n: int) -> int:
    if k < 1:
        raise ConfigError(f"K must be >= 1, got {k}")
    if k > n - 1:
        logger.warning("K=%d exceeds N-1=%d; clamping", k, n - 1)
        return max(n - 1, 0)
    return k


def smallest_k(d: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` smallest entries along the last axis, ordered by
    (value, index) -- the same result as a stable argsort truncated to ``k``.
    """
    n = d.shape[-1]
    if k >= n:
        return np.argsort(d, axis=-1, kind="stable")[..., :k]
    lead = d.shape[:-1]
    d2 = d.reshape(-1, n)
    part = np.argpartition(d2, k - 1, axis=1)[:, :k]
    vals = np.take_along_axis(d2, part, axis=1)
    order = np.lexsort((part, vals), axis=-1)
    out = np.take_along_axis(part, order, axis=1)
    # rows with a tie at the k-th value need the full index-ordered sort
    kth = np.take_along_axis(vals, order[:, -1:], axis=1)
    tied = (d2 <= kth).sum(axis=1) > k
    if tied.any():
        out[tied] = np.argsort(d2[tied], axis=1, kind="stable")[:, :k]
    return out.reshape(lead + (k,))


def _knn_brute_single(p: np.ndarray, k: int) -> np.ndarray:
    d2 = _sqdist(p[:, None, :], p[None, :, :])
    np.fill_diagonal(d2, np.inf)
    return smallest_k(d2, k)


def _knn_kdtree_single(p: np.ndarray, k: int) -> np.ndarray:
    n = p.shape[0]
    tree = cKDTree(p)
    dist, _ = tree.query(p, k=min(k + 1, n))
    radius = dist[:, -1]
    # every point at distance <= the (k+1)-th query distance is a candidate,
    # which covers boundary ties; the final order is decided exactly below
    cands = tree.query_ball_point(p, radius * (1 + 1e-9) + 1e-12)
    out = np.empty((n, k), dtype=np.int64)
    for i, c in enumerate(cands):
        c = np.asarray(c, dtype=np.int64)
        c = c[c != i]
        d2 = _sqdist(p[c], p[i])
        order = np.lexsort((c, d2))
        out[i] = c[order[:k]]
    return out


def knn(points, k: int, method: str = "brute") -> NeighborIndex:
    """Exact K nearest neighbors by squared Euclidean distance, excluding self.

    Ties are broken by lower index. ``method="kdtree"`` uses a spatial
    partition to find candidates and agrees exactly with ``"brute"``.

    Args:
        points: Array of shape (N, D) or (B, N, D).
        k: Neighbor count; clamped to N - 1 with a warning.
        method: ``"brute"`` or ``"kdtree"``.
    """
    p = np.asarray(points.data if isinstance(points, Tensor) else points, dtype=np.float64)
    if p.ndim not in (2, 3):
        raise DimensionError(f"knn expects (N, D) or (B, N, D) points, got {p.shape}")
    n = p.shape[-2]
    k = _clamp_k(k, n)
    fn = {"brute": _knn_brute_single, "kdtree": _knn_kdtree_single}.get(method)
    if fn is None:
        raise ConfigError(f"unknown knn method {method!r}")
    if p.ndim == 2:
        return NeighborIndex(fn(p, k), "knn")
    return NeighborIndex(np.stack([fn(cloud, k) for cloud in p]), "knn")


def random_distant(points, knn_index, k: int, rng: np.random.Generator) -> NeighborIndex:
    """Per point, ``k`` uniform draws without replacement from the points that
    are neither the point itself nor among its nearest neighbors.
    """
    table = knn_index.idx if isinstance(knn_index, NeighborIndex) else np.asarray(knn_index)
    single = table.ndim == 2
    if single:
        table = table[None]
    B, n, k_near = table.shape
    pool = n - 1 - k_near
    if pool < 1:
        raise ConfigError(f"no distant candidates: N={n}, {k_near} nearest neighbors")
    if k > pool:
        logger.warning("random_distant K=%d exceeds eligible pool %d; clamping", k, pool)
        k = pool
    keys = rng.random((B, n, n))
    rows = np.arange(n)
    keys[:, rows, rows] = np.inf
    np.put_along_axis(keys, table, np.inf, axis=2)
    part = np.argpartition(keys, k - 1, axis=2)[..., :k]
    # order the draw by key so the result is a uniformly random ordered sample
    order = np.argsort(np.take_along_axis(keys, part, axis=2), axis=2, kind="stable")
    out = np.take_along_axis(part, order, axis=2)
    return NeighborIndex(out[0] if single else out, "random_distant")


def _as_batched_index(nbr, batch: int, n: int) -> np.ndarray:
    idx = nbr.idx if isinstance(nbr, NeighborIndex) else np.asarray(nbr)
    idx = idx.astype(np.int64, copy=False)
    if idx.ndim == 2:
        idx = np.broadcast_to(idx, (batch,) + idx.shape)
    if idx.shape[:2] != (batch, n):
        raise DimensionError(f"neighbor table {idx.shape} does not match batch {batch} x {n} points")
    return idx


def group(xt: Tensor, idx: np.ndarray, variant: str) -> Tensor:
    """Channel-last grouping: (B, N, C) features -> (B, N, K, C)."""
    neigh = nd.index_points(xt, idx)
    if variant == "neighbor":
        return neigh
    if variant == "diff":
        B, N, C = xt.shape
        return neigh - xt.reshape(B, N, 1, C)
    raise ConfigError(f"unknown neighbor variant {variant!r}")


def select_neighbors(x: Tensor, nbr, variant: str = "neighbor") -> Tensor:
    """Gather neighbor features (``"neighbor"``) or neighbor minus center (``"diff"``).

    Args:
        x: Features of shape (B, C, N).
        nbr: NeighborIndex or integer table of shape (N, K) / (B, N, K).

    Returns:
        Tensor of shape (B, C, N, K).
    """
    B, C, N = x.shape
    idx = _as_batched_index(nbr, B, N)
    g = group(nd.transpose(x, (0, 2, 1)), idx, variant)
    return nd.transpose(g, (0, 3, 1, 2))


def _center_concat(pcd: Tensor, k: int, variant: str, nbr=None) -> Tensor:
    B, C, N = pcd.shape
    if nbr is None:
        nbr = knn(np.transpose(pcd.data, (0, 2, 1)), k)
    grouped = select_neighbors(pcd, nbr, variant)
    repeated = nd.expand(pcd, 3, grouped.shape[3])
    return nd.concat([repeated, grouped], axis=1)


def center_neighbor(pcd: Tensor, k: int, nbr=None) -> Tensor:
    """Repeat each center K times and concatenate with its neighbors: (B, 2C, N, K)."""
    return _center_concat(pcd, k, "neighbor", nbr)


def center_diff(pcd: Tensor, k: int, nbr=None) -> Tensor:
    """Repeat each center K times and concatenate with neighbor - center: (B, 2C, N, K)."""
    return _center_concat(pcd, k, "diff", nbr)


# ------------------------------------------------------------------ embedding
def init_embed(w: Weights, rng, prefix: str = "embed", in_channels: int = 3, hidden: int = 64, out: int = 128,
               dtype=np.float32) -> None:
    for branch in ("local", "global"):
        add_linear(w, rng, f"{prefix}.{branch}.0", 2 * in_channels, hidden, dtype=dtype)
        add_linear(w, rng, f"{prefix}.{branch}.1", hidden, hidden, dtype=dtype)
    add_linear(w, rng, f"{prefix}.fuse", 2 * hidden, out, dtype=dtype)


def _branch(params: Mapping[str, Tensor], name: str, pts: Tensor, idx: np.ndarray, variant: str) -> Tensor:
    B, N, C = pts.shape
    K = idx.shape[-1]
    grouped = group(pts, idx, variant)
    center = nd.expand(pts, 2, K)
    h = nd.concat([center, grouped], axis=3)
    h = nd.relu(nd.linear(h, params[f"{name}.0.weight"], params[f"{name}.0.bias"]))
    h = nd.relu(nd.linear(h, params[f"{name}.1.weight"], params[f"{name}.1.bias"]))
    return nd.max(h, axis=2)


def embed(
    pcd: Tensor,
    params: Mapping[str, Tensor],
    k: int = 32,
    rng: Optional[np.random.Generator] = None,
    prefix: str = "embed",
    variant: str = "diff",
    use_global: bool = True,
    local_index=None,
    global_index=None,
    channel_last: bool = False,
) -> Tensor:
    """Fused local/global neighborhood embedding.

    The local branch groups each point with its K nearest neighbors, the
    global branch with K random points outside that neighborhood. Each
    branch is a two-layer pointwise MLP followed by a max over the group;
    the two results are concatenated and projected to the output width.

    Args:
        pcd: Coordinates of shape (B, 3, N).
        params: Mapping holding ``{prefix}.local.*``, ``{prefix}.global.*``
            and ``{prefix}.fuse.*`` weights.
        rng: Source of the random distant draws (required when
            ``use_global`` and no ``global_index`` is given).
        variant: ``"diff"`` (center, neighbor - center) or ``"neighbor"``
            (center, neighbor) grouping.
        use_global: With False the global branch contributes zeros.
        local_index, global_index: Optional precomputed tables.
        channel_last: Return (B, N, D) instead of (B, D, N).
    """
    B, C, N = pcd.shape
    pts = nd.transpose(pcd, (0, 2, 1))
    if local_index is None:
        local_index = knn(pts.data, k)
    lidx = _as_batched_index(local_index, B, N)
    local = _branch(params, f"{prefix}.local", pts, lidx, variant)
    if use_global:
        if global_index is None:
            if rng is None:
                raise ConfigError("embed needs an rng for the global branch")
            global_index = random_distant(pts.data, lidx, lidx.shape[-1], rng)
        gidx = _as_batched_index(global_index, B, N)
        glob = _branch(params, f"{prefix}.global", pts, gidx, variant)
    else:
        glob = Tensor(np.zeros(local.shape, dtype=local.dtype))
    fused = nd.relu(nd.linear(nd.concat([local, glob], axis=2), params[f"{prefix}.fuse.weight"],
                              params[f"{prefix}.fuse.bias"]))
    return fused if channel_last else nd.transpose(fused, (0, 2, 1))


def neighbors_to_csv(table: np.ndarray, path) -> None:
    """Write an (N, K) table as CSV rows ``point,n0,n1,...``."""
    t = np.asarray(table)
    with open(path, "w") as fh:
        fh.write("point," + ",".join(f"n{j}" for j in range(t.shape[1])) + "\n")
        for i, row in enumerate(t):
            fh.write(f"{i}," + ",".join(str(int(v)) for v in row) + "\n")
