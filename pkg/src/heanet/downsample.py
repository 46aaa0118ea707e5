"""Attention-scored downsampling and classical baseline samplers.

Global sampler
    Row-softmax self-attention ``A = softmax(q k^T / sqrt(d))`` over all
    points. A point's selection score is the column sum of ``A`` (the total
    attention it receives). The output for each selected point is its
    attention row applied to the values.

Local sampler
    Each point attends over its K nearest neighbors, with the point's own
    feature as query and the neighbor-minus-center feature differences as
    keys. The selection score is the population standard deviation of that
    K-way attention distribution: points whose neighborhoods are
    heterogeneous (edges, corners) attend unevenly.

Every sampler returns a :class:`SampleSelection` whose ``idx`` is ordered by
descending score with ascending-index tie-break.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import ndtensor as nd
from .exceptions import ArgumentError, ConfigError, DimensionError, FormatError, SizeError
from .ndtensor import Tensor
from .neighbors import _as_batched_index, _sqdist, knn
from .weights import Weights, kaiming_uniform

CORRELATION_MAGIC = b"HEAC0001"


@dataclass
class SampleSelection:
    """Selected indices (``(..., M)``) and per-input-point scores (``(..., N)``)."""

    idx: np.ndarray
    scores: np.ndarray
    method: str

    @property
    def m(self) -> int:
        return self.idx.shape[-1]

    def to_csv(self, path, batch: int = 0) -> None:
        """Write ``index,score`` rows for every input point, selected ones first."""
        scores = self.scores[batch] if self.scores.ndim == 2 else self.scores
        idx = self.idx[batch] if self.idx.ndim == 2 else self.idx
        rest = np.setdiff1d(np.arange(scores.shape[0]), idx)
        rest = rest[np.argsort(-scores[rest], kind="stable")]
        with open(path, "w") as fh:
            fh.write("index,score,selected\n")
            for i in idx:
                fh.write(f"{int(i)},{float(scores[i])!r},1\n")
            for i in rest:
                fh.write(f"{int(i)},{float(scores[i])!r},0\n")


@dataclass
class Projections:
    """Query/key/value projection matrices, each applied over the channel axis."""

    query: Tensor
    key: Tensor
    value: Tensor

    @property
    def d(self) -> int:
        return self.query.shape[1]

    @classmethod
    def from_weights(cls, w, prefix: str) -> "Projections":
        return cls(w[f"{prefix}.query"], w[f"{prefix}.key"], w[f"{prefix}.value"])

    @classmethod
    def random(cls, channels: int, rng: np.random.Generator, d: Optional[int] = None,
               value_channels: Optional[int] = None, dtype=np.float64) -> "Projections":
        d = d if d is not None else default_qk_width(channels)
        cv = value_channels if value_channels is not None else channels
        return cls(
            Tensor(kaiming_uniform(rng, channels, d, 1.0, dtype), requires_grad=True),
            Tensor(kaiming_uniform(rng, channels, d, 1.0, dtype), requires_grad=True),
            Tensor(kaiming_uniform(rng, channels, cv, 1.0, dtype), requires_grad=True),
        )

    def tensors(self) -> list:
        return [self.query, self.key, self.value]


def default_qk_width(channels: int) -> int:
    return max(1, math.ceil(channels / 2))


def init_projections(w: Weights, rng, prefix: str, channels: int, d: Optional[int] = None,
                     value_channels: Optional[int] = None, dtype=np.float32) -> None:
    d = d if d is not None else default_qk_width(channels)
    cv = value_channels if value_channels is not None else channels
    w.add(f"{prefix}.query", kaiming_uniform(rng, channels, d, 1.0, dtype))
    w.add(f"{prefix}.key", kaiming_uniform(rng, channels, d, 1.0, dtype))
    w.add(f"{prefix}.value", kaiming_uniform(rng, channels, cv, 1.0, dtype))


def top_m(scores: np.ndarray, m: int) -> np.ndarray:
    """Indices of the ``m`` largest scores, ties resolved toward lower index."""
    return np.argsort(-scores, axis=-1, kind="stable")[..., :m]


def _check_m(m: int, n: int) -> None:
    if m < 1 or m > n:
        raise ArgumentError(f"sample count M={m} must lie in [1, N={n}]")


def _check_proj(proj: Projections, channels: int) -> None:
    if proj.d == 0:
        raise ConfigError("query/key width d must be positive")
    if proj.query.shape[0] != channels:
        raise DimensionError(f"projections expect {proj.query.shape[0]} channels, features have {channels}")


# ------------------------------------------------------------- global sampler
def global_attention(xt: Tensor, proj: Projections):
    """Return ``(A, v)`` with A of shape (B, N, N) and v of shape (B, N, C_v)."""
    q = xt @ proj.query
    k = xt @ proj.key
    v = xt @ proj.value
    energy = nd.scale(q @ nd.transpose(k, (0, 2, 1)), 1.0 / math.sqrt(proj.d))
    # order-independent sums keep the scores exactly permutation-equivariant
    return nd.softmax(energy, axis=-1, order_invariant=True), v


def global_scores(attn: np.ndarray) -> np.ndarray:
    """Column sums of the row-stochastic attention map (attention received),
    summed in sorted order so they do not depend on the point order."""
    return nd.ordered_sum(attn, axis=-2)


def _global_cl(xt: Tensor, m: int, proj: Projections):
    B, N, C = xt.shape
    _check_m(m, N)
    _check_proj(proj, C)
    attn, v = global_attention(xt, proj)
    scores = global_scores(attn.data)
    idx = top_m(scores, m)
    return _global_pool(attn, v, idx, scores), SampleSelection(idx, scores, "global")


def global_downsample(x: Tensor, m: int, proj: Projections):
    """Attention-scored global downsampling.

    Args:
        x: Features of shape (B, C, N).
        m: Number of points to keep.
        proj: Query/key/value projections.

    Returns:
        ``(features, selection)`` with features of shape (B, C_v, M).
    """
    out, sel = _global_cl(nd.transpose(x, (0, 2, 1)), m, proj)
    return nd.transpose(out, (0, 2, 1)), sel


# -------------------------------------------------------------- local sampler
def local_attention(xt: Tensor, idx: np.ndarray, proj: Projections):
    """Return ``(A, v)``: A of shape (B, N, K) over each point's neighbors and
    the per-point values v of shape (B, N, C_v) (neighbor ``j`` of point ``i``
    contributes ``v[idx[i, j]]``).
    """
    B, N, C = xt.shape
    K = idx.shape[-1]
    d = proj.d
    q = xt @ proj.query
    kx = xt @ proj.key
    # by linearity q_i . W(x_j - x_i) = s_ij - s_ii with s = q kx^T, so the
    # (B, N, K, d) neighbor-difference tensor never has to be built
    s = q @ nd.transpose(kx, (0, 2, 1))
    diag = np.broadcast_to(np.arange(N).reshape(1, N, 1), (B, N, 1))
    energy = nd.take_along(s, idx, axis=2) - nd.take_along(s, diag, axis=2)
    attn = nd.softmax(nd.scale(energy, 1.0 / math.sqrt(d)), axis=-1)
    return attn, xt @ proj.value


def local_scores(attn: np.ndarray) -> np.ndarray:
    """Population standard deviation of each point's K-way attention."""
    return attn.std(axis=-1)


def _global_pool(attn: Tensor, v: Tensor, idx: np.ndarray, scores: np.ndarray) -> Tensor:
    """Attention rows of the selected points applied to the values, (B, M, C_v).

    The sum over keys runs in descending score order rather than input
    order, so permuting the input points cannot change a single bit.
    """
    order = np.argsort(-scores, axis=-1, kind="stable")
    rows = nd.permute_along(nd.index_points(attn, idx), order[:, None, :], axis=2)
    return rows @ nd.index_points(v, order)


def _local_pool(attn: Tensor, v: Tensor, idx_nbr: np.ndarray, idx: np.ndarray) -> Tensor:
    """Attention-weighted neighbor values for the selected points, (B, M, C_v)."""
    a = nd.index_points(attn, idx)
    cols = np.take_along_axis(idx_nbr, idx[..., None], axis=1)
    B, M, K = a.shape
    # (B, M, 1, K) @ (B, M, K, C_v): summed in neighbor-table order
    out = nd.reshape(a, (B, M, 1, K)) @ nd.index_points(v, cols)
    return nd.reshape(out, (B, M, v.shape[2]))


def _neighbor_table(points, nbr, k: int, B: int, N: int) -> np.ndarray:
    if nbr is None:
        if points is None:
            raise ArgumentError("local sampling needs either points or a neighbor table")
        pts = np.asarray(points, dtype=np.float64)
        if pts.shape[-2] != N:
            raise DimensionError(f"points {pts.shape} do not match {N} feature columns")
        nbr = knn(pts, k)
    return _as_batched_index(nbr, B, N)


def _local_cl(xt: Tensor, points, m: int, k: int, proj: Projections, nbr=None):
    B, N, C = xt.shape
    _check_m(m, N)
    _check_proj(proj, C)
    idx_nbr = _neighbor_table(points, nbr, k, B, N)
    attn, v = local_attention(xt, idx_nbr, proj)
    scores = local_scores(attn.data)
    idx = top_m(scores, m)
    return _local_pool(attn, v, idx_nbr, idx), SampleSelection(idx, scores, "local")


def local_downsample(x: Tensor, points, m: int, k: int, proj: Projections, nbr=None):
    """Attention-scored local (edge) downsampling.

    Args:
        x: Features of shape (B, C, N).
        points: Coordinates (N, 3) or (B, N, 3) used for the neighbor search.
        m: Number of points to keep.
        k: Neighborhood size.
        proj: Query/key/value projections.
        nbr: Optional precomputed neighbor table; overrides ``points``.

    Returns:
        ``(features, selection)`` with features of shape (B, C_v, M).
    """
    out, sel = _local_cl(nd.transpose(x, (0, 2, 1)), points, m, k, proj, nbr)
    return nd.transpose(out, (0, 2, 1)), sel


# ------------------------------------------------------------------- combined
def zscore(s: np.ndarray) -> np.ndarray:
    mu = s.mean(axis=-1, keepdims=True)
    sd = s.std(axis=-1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(sd > 0, (s - mu) / np.where(sd > 0, sd, 1.0), 0.0)


def _gld_cl(xt: Tensor, points, m: int, k: int, gproj: Projections, lproj: Projections,
            mode: str = "shared_index", nbr=None):
    B, N, C = xt.shape
    if mode == "independent_sum":
        g_out, g_sel = _global_cl(xt, m, gproj)
        l_out, _ = _local_cl(xt, points, m, k, lproj, nbr)
        return g_out + l_out, SampleSelection(g_sel.idx, g_sel.scores, "gld")
    if mode != "shared_index":
        raise ConfigError(f"unknown fusion mode {mode!r}")
    _check_m(m, N)
    _check_proj(gproj, C)
    _check_proj(lproj, C)
    idx_nbr = _neighbor_table(points, nbr, k, B, N)
    g_attn, g_v = global_attention(xt, gproj)
    l_attn, l_v = local_attention(xt, idx_nbr, lproj)
    fused = zscore(global_scores(g_attn.data)) + zscore(local_scores(l_attn.data))
    idx = top_m(fused, m)
    out = _global_pool(g_attn, g_v, idx, fused) + _local_pool(l_attn, l_v, idx_nbr, idx)
    return out, SampleSelection(idx, fused, "gld")


def global_local_downsample(x: Tensor, points, m: int, k: int, gproj: Projections, lproj: Projections,
                            mode: str = "shared_index", nbr=None):
    """Sum of global and local attention outputs.

    ``mode="independent_sum"`` runs both samplers on their own selections and
    adds the feature outputs; the reported selection is the global one.
    ``mode="shared_index"`` z-scores both score vectors, adds them, selects
    one top-M set and evaluates both attention outputs on it.
    """
    out, sel = _gld_cl(nd.transpose(x, (0, 2, 1)), points, m, k, gproj, lproj, mode, nbr)
    return nd.transpose(out, (0, 2, 1)), sel


# --------------------------------------------------------- correlation matrix
@dataclass
class CorrelationMatrix:
    matrix: np.ndarray
    neighbors: np.ndarray

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    @property
    def global_part(self) -> np.ndarray:
        return self.matrix[:, : self.n]

    @property
    def local_part(self) -> np.ndarray:
        return self.matrix[:, self.n :]

    def row_sums(self):
        return self.global_part.sum(axis=1), self.local_part.sum(axis=1)

    def save(self, path) -> None:
        """HEAC0001 dump: magic, u32 N, then N*2N little-endian f32 row-major."""
        with open(path, "wb") as fh:
            fh.write(CORRELATION_MAGIC)
            fh.write(np.uint32(self.n).astype("<u4").tobytes())
            fh.write(np.ascontiguousarray(self.matrix, dtype="<f4").tobytes())


def load_correlation(path) -> np.ndarray:
    raw = open(path, "rb").read()
    if raw[:8] != CORRELATION_MAGIC:
        raise FormatError(f"{path}: bad magic")
    n = int(np.frombuffer(raw, dtype="<u4", count=1, offset=8)[0])
    if len(raw) != 12 + 8 * n * n:
        raise FormatError(f"{path}: size does not match N={n}")
    return np.frombuffer(raw, dtype="<f4", offset=12).reshape(n, 2 * n)


def correlation_matrix(x: Tensor, points, k: int, gproj: Projections, lproj: Projections,
                       cap: int = 2048, nbr=None) -> CorrelationMatrix:
    """Dense N x 2N matrix ``[global attention | local attention scattered to neighbor columns]``.

    Args:
        x: Features of a single cloud, shape (C, N) or (1, C, N).
    """
    if x.ndim == 2:
        x = nd.reshape(x, (1,) + x.shape)
    if x.shape[0] != 1:
        raise DimensionError("correlation_matrix handles one cloud at a time")
    N = x.shape[2]
    if N > cap:
        raise SizeError(f"N={N} exceeds the correlation export cap {cap}")
    xt = nd.transpose(x, (0, 2, 1))
    pts = None if points is None else np.asarray(points, dtype=np.float64).reshape(1, N, -1)
    idx_nbr = _neighbor_table(pts, nbr, k, 1, N)
    with nd.no_grad():
        g_attn, _ = global_attention(xt, gproj)
        l_attn, _ = local_attention(xt, idx_nbr, lproj)
    mat = np.zeros((N, 2 * N), dtype=np.float64)
    mat[:, :N] = g_attn.data[0]
    rows = np.repeat(np.arange(N), idx_nbr.shape[-1])
    mat[rows, N + idx_nbr[0].ravel()] = l_attn.data[0].ravel()
    return CorrelationMatrix(mat, idx_nbr[0].copy())


# ---------------------------------------------------------------- baselines
def random_sample(points, m: int, rng: np.random.Generator) -> SampleSelection:
    """Uniform sampling without replacement; scores are the random keys."""
    n = np.asarray(points).shape[0]
    _check_m(m, n)
    keys = rng.random(n)
    return SampleSelection(top_m(keys, m), keys, "rs")


def fps(points, m: int, start: int = 0) -> SampleSelection:
    """Farthest point sampling.

    Scores hold each point's squared distance to the selected set at the
    moment it was chosen (``inf`` for the start point); unselected points get
    their final distance.
    """
    p = np.asarray(points, dtype=np.float64)
    n = p.shape[0]
    _check_m(m, n)
    if not 0 <= start < n:
        raise ArgumentError(f"start index {start} out of range for N={n}")
    chosen = np.empty(m, dtype=np.int64)
    scores = np.full(n, np.inf)
    taken = np.zeros(n, dtype=bool)
    min_d = np.full(n, np.inf)
    current = start
    for t in range(m):
        chosen[t] = current
        taken[current] = True
        scores[current] = min_d[current]
        min_d = np.minimum(min_d, _sqdist(p, p[current]))
        if t + 1 < m:
            cand = np.where(taken, -np.inf, min_d)
            current = int(np.argmax(cand))
    rest = ~taken
    scores[rest] = min_d[rest]
    return SampleSelection(chosen, scores, "fps")


def _voxel_cells(p: np.ndarray, origin: np.ndarray, h: float):
    keys = np.floor((p - origin) / h).astype(np.int64)
    _, inverse, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    return inverse.reshape(-1), counts


def voxel_sample(points, m: int, iterations: int = 60) -> SampleSelection:
    """Grid subsampling with a searched cell size.

    The cell size is bisected to the largest value whose occupied-cell count
    is at least ``m``. Each cell is represented by its point nearest the
    cell centroid; the ``m`` most populated cells are kept. If even a tiny
    grid cannot produce ``m`` cells (duplicate points), the remainder is
    filled with the lowest unused indices.
    """
    p = np.asarray(points, dtype=np.float64)
    n = p.shape[0]
    _check_m(m, n)
    origin = p.min(axis=0)
    extent = float((p.max(axis=0) - origin).max())
    lo, hi = max(extent, 1.0) * 1e-9, max(extent, 1e-12) * 1.01 + 1e-12
    if len(_voxel_cells(p, origin, hi)[1]) >= m:
        lo = hi
    else:
        for _ in range(iterations):
            mid = 0.5 * (lo + hi)
            if len(_voxel_cells(p, origin, mid)[1]) >= m:
                lo = mid
            else:
                hi = mid
    inverse, counts = _voxel_cells(p, origin, lo)
    n_cells = len(counts)
    sums = np.zeros((n_cells, 3))
    np.add.at(sums, inverse, p)
    centroids = sums / counts[:, None]
    d2 = _sqdist(p, centroids[inverse])
    order = np.lexsort((np.arange(n), d2, inverse))
    first = np.ones(n, dtype=bool)
    first[1:] = inverse[order[1:]] != inverse[order[:-1]]
    reps = order[first]  # representative point per cell, cells in ascending id
    scores = np.zeros(n)
    scores[reps] = counts
    idx = top_m(scores, min(m, n_cells))
    if idx.size < m:
        unused = np.setdiff1d(np.arange(n), idx)[: m - idx.size]
        idx = np.concatenate([idx, unused])
    return SampleSelection(idx, scores, "voxel")
