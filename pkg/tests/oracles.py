"""Naive reference implementations used as test oracles.

Everything here is written with explicit Python loops over points, heads
and neighbors in float64, deliberately sharing no code with the package.
"""

import math

import numpy as np


def softmax_row(e):
    e = np.asarray(e, dtype=np.float64)
    z = np.exp(e - e.max())
    return z / z.sum()


def knn_brute(points, k):
    """Per point, the k nearest other points ordered by (distance, index)."""
    p = np.asarray(points, dtype=np.float64)
    n = len(p)
    table = np.zeros((n, k), dtype=np.int64)
    for i in range(n):
        cand = []
        for j in range(n):
            if j == i:
                continue
            d = sum((p[i, c] - p[j, c]) ** 2 for c in range(p.shape[1]))
            cand.append((d, j))
        cand.sort()
        table[i] = [j for _, j in cand[:k]]
    return table


def fps_brute(points, m, start=0):
    """Greedy max-min selection recomputing every distance from scratch."""
    p = np.asarray(points, dtype=np.float64)
    chosen = [start]
    while len(chosen) < m:
        best, best_d = -1, -1.0
        for j in range(len(p)):
            if j in chosen:
                continue
            d = min(float(np.sum((p[j] - p[c]) ** 2)) for c in chosen)
            if d > best_d:
                best, best_d = j, d
        chosen.append(best)
    return np.array(chosen)


def top_m(scores, m):
    order = sorted(range(len(scores)), key=lambda j: (-scores[j], j))
    return np.array(order[:m])


def global_oracle(x, wq, wk, wv, m):
    """x: (C, N). Returns (out (C_v, M), idx, column sums, attention)."""
    x = np.asarray(x, dtype=np.float64)
    C, N = x.shape
    d = wq.shape[1]
    q = [x[:, i] @ wq for i in range(N)]
    k = [x[:, j] @ wk for j in range(N)]
    v = [x[:, j] @ wv for j in range(N)]
    attn = np.zeros((N, N))
    for i in range(N):
        e = [float(np.dot(q[i], k[j])) / math.sqrt(d) for j in range(N)]
        attn[i] = softmax_row(e)
    u = [sum(attn[i, j] for i in range(N)) for j in range(N)]
    idx = top_m(u, m)
    out = np.zeros((wv.shape[1], m))
    for r, i in enumerate(idx):
        for j in range(N):
            out[:, r] += attn[i, j] * v[j]
    return out, idx, np.array(u), attn


def local_oracle(x, nbr, wq, wk, wv, m):
    """Keys from neighbor-minus-center feature differences, values from neighbors.

    Returns (out (C_v, M), idx, std scores, per-point attention (N, K)).
    """
    x = np.asarray(x, dtype=np.float64)
    C, N = x.shape
    d = wq.shape[1]
    K = nbr.shape[1]
    attn = np.zeros((N, K))
    scores = np.zeros(N)
    for i in range(N):
        q = x[:, i] @ wq
        e = [float(np.dot(q, (x[:, nbr[i, j]] - x[:, i]) @ wk)) / math.sqrt(d) for j in range(K)]
        attn[i] = softmax_row(e)
        mean = sum(attn[i]) / K
        scores[i] = math.sqrt(sum((a - mean) ** 2 for a in attn[i]) / K)
    idx = top_m(scores, m)
    out = np.zeros((wv.shape[1], m))
    for r, i in enumerate(idx):
        for j in range(K):
            out[:, r] += attn[i, j] * (x[:, nbr[i, j]] @ wv)
    return out, idx, scores, attn


def zscore(s):
    s = np.asarray(s, dtype=np.float64)
    mu = sum(s) / len(s)
    sd = math.sqrt(sum((v - mu) ** 2 for v in s) / len(s))
    return np.zeros_like(s) if sd == 0 else (s - mu) / sd


def gld_oracle(x, nbr, gw, lw, m, mode="shared_index"):
    """gw/lw: (wq, wk, wv) tuples. Returns (out, idx)."""
    if mode == "independent_sum":
        g_out, g_idx, _, _ = global_oracle(x, *gw, m)
        l_out, _, _, _ = local_oracle(x, nbr, *lw, m)
        return g_out + l_out, g_idx
    _, _, u, g_attn = global_oracle(x, *gw, 1)
    _, _, s, l_attn = local_oracle(x, nbr, *lw, 1)
    fused = zscore(u) + zscore(s)
    idx = top_m(fused, m)
    x = np.asarray(x, dtype=np.float64)
    N = x.shape[1]
    gv, lv = gw[2], lw[2]
    out = np.zeros((gv.shape[1], m))
    for r, i in enumerate(idx):
        for j in range(N):
            out[:, r] += g_attn[i, j] * (x[:, j] @ gv)
        for j in range(nbr.shape[1]):
            out[:, r] += l_attn[i, j] * (x[:, nbr[i, j]] @ lv)
    return out, idx


def correlation_oracle(x, nbr, gw, lw):
    x = np.asarray(x, dtype=np.float64)
    N = x.shape[1]
    _, _, _, g_attn = global_oracle(x, *gw, 1)
    _, _, _, l_attn = local_oracle(x, nbr, *lw, 1)
    mat = np.zeros((N, 2 * N))
    for i in range(N):
        for j in range(N):
            mat[i, j] = g_attn[i, j]
        for r in range(nbr.shape[1]):
            mat[i, N + nbr[i, r]] += l_attn[i, r]
    return mat


def mha_oracle(queries, keys_values, wq, wk, wv, wo, heads):
    """queries (T_q, C), keys_values (T_k, C); per-head loops."""
    qx = np.asarray(queries, dtype=np.float64)
    kx = np.asarray(keys_values, dtype=np.float64)
    Tq, C = qx.shape
    dh = C // heads
    merged = np.zeros((Tq, C))
    for h in range(heads):
        cols = slice(h * dh, (h + 1) * dh)
        for t in range(Tq):
            q = (qx[t] @ wq)[cols]
            e = [float(np.dot(q, (kv @ wk)[cols])) / math.sqrt(dh) for kv in kx]
            a = softmax_row(e)
            for s, kv in enumerate(kx):
                merged[t, cols] += a[s] * (kv @ wv)[cols]
    return merged @ wo


def upsample_oracle(feats, coarse, fine, k=3, eps=1e-8):
    feats = np.asarray(feats, dtype=np.float64)
    out = np.zeros((len(fine), feats.shape[1]))
    for i, p in enumerate(fine):
        d = sorted((math.sqrt(float(np.sum((p - c) ** 2))), j) for j, c in enumerate(coarse))[:k]
        w = [1.0 / (dist + eps) for dist, _ in d]
        total = sum(w)
        for (_, j), wj in zip(d, w):
            out[i] += wj / total * feats[j]
    return out


def batchnorm_eval(x, gamma, beta, mean, var, eps=1e-5):
    """x: (C, N) channel-first."""
    out = np.zeros_like(x, dtype=np.float64)
    for c in range(x.shape[0]):
        out[c] = (x[c] - mean[c]) / math.sqrt(var[c] + eps) * gamma[c] + beta[c]
    return out


def transformer_oracle(x, w, prefix, heads):
    """Eval-mode block on one (C, N) cloud with memory == x."""
    x = np.asarray(x, dtype=np.float64)
    t = x.T

    def mats(name):
        return [np.asarray(w[f"{prefix}.{name}.{p}"].data, dtype=np.float64) for p in ("query", "key", "value", "out")]

    h = t + mha_oracle(t, t, *mats("self_attn"), heads)
    h = h + mha_oracle(h, t, *mats("cross_attn"), heads)
    w0 = np.asarray(w[f"{prefix}.ff.0.weight"].data, dtype=np.float64)
    b0 = np.asarray(w[f"{prefix}.ff.0.bias"].data, dtype=np.float64)
    w1 = np.asarray(w[f"{prefix}.ff.1.weight"].data, dtype=np.float64)
    b1 = np.asarray(w[f"{prefix}.ff.1.bias"].data, dtype=np.float64)
    ff = np.zeros_like(h)
    for r in range(len(h)):
        hidden = np.maximum(h[r] @ w0 + b0, 0.0)
        ff[r] = hidden @ w1 + b1
    y = (h + ff).T
    for bn in ("bn1", "bn2"):
        y = batchnorm_eval(y, w[f"{prefix}.{bn}.gamma"].data, w[f"{prefix}.{bn}.beta"].data,
                           w.buffer(f"{prefix}.{bn}.running_mean"), w.buffer(f"{prefix}.{bn}.running_var"))
    return y
