"""Acceptance suite: one test and one PASS/FAIL summary line per criterion.

Tolerances and budgets are pinned below. The toy-training criteria (6, 7)
and the benchmark (8) take tens of minutes on one core; everything else
finishes in about a minute.
"""

import dataclasses
import time

import numpy as np
import pytest

from heanet import ndtensor as nd
from heanet.attention import MHAWeights, multi_head_attention, transformer_attention
from heanet.benchmark import run_benchmark
from heanet.checkpoint import load_checkpoint
from heanet.cli import checkpoint_path, main
from heanet.config import preset
from heanet.data import load_split
from heanet.downsample import (
    Projections,
    correlation_matrix,
    fps,
    global_attention,
    global_downsample,
    global_local_downsample,
    local_attention,
    local_downsample,
)
from heanet.model import ModelSpec, forward, init_weights, upsample
from heanet.ndtensor import Tensor, grad_check
from heanet.neighbors import knn, random_distant
from heanet.pcio import PointCloud, make_synthetic, write_cloud
from heanet.train import cosine_lr, evaluate, fit

import oracles
from test_attention import _block
from test_ndtensor import OPS

GRAD_EPS = 1e-5
GRAD_TOL = 1e-4
MICRO_TOL = 1e-3
GRAD_BUDGET_S = 60.0
ORACLE_TOL = 1e-5
ORACLE_INSTANCES = 50
ORACLE_BUDGET_S = 60.0
SUM_TOL = 1e-5
TOY_SEEDS = 5
TOY_PASSES = 4
TOY_BUDGET_S = 20 * 60.0
CLS_TARGET = 0.90
SEG_TARGET = 0.75
BENCH_BUDGET_S = 5 * 60.0
BENCH_SEEDS = 20


def _f64(proj):
    return tuple(np.asarray(t.data, dtype=np.float64) for t in (proj.query, proj.key, proj.value))


def test_criterion_01_gradients(report):
    start = time.perf_counter()
    worst_op, worst_name = 0.0, ""
    for name, (f, shape) in sorted(OPS.items()):
        x = np.random.default_rng(11).normal(size=shape)
        if name == "relu":
            x = x + np.sign(x) * 0.1
        err = grad_check(lambda t: nd.sum(f(t)), x, GRAD_EPS)
        if err >= worst_op:
            worst_op, worst_name = err, name
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    worst_op = max(worst_op, grad_check(lambda t: nd.sum(nd.matmul(t, Tensor(b))), a, GRAD_EPS),
                   grad_check(lambda t: nd.sum(nd.matmul(Tensor(a), t)), b, GRAD_EPS))

    w = _block(c=8, heads=2, seed=7)
    x = Tensor(np.random.default_rng(8).normal(size=(1, 8, 4)), requires_grad=True)
    head = Tensor(np.random.default_rng(9).normal(size=(1, 8, 4)))
    block = nd.parameters_grad_check(lambda: nd.sum(transformer_attention(x, w, "blk", 2) * head),
                                     [x] + w.trainable(), GRAD_EPS)

    spec = ModelSpec(n_points=32, stages=(32, 16, 8), k=4, width=16, embed_hidden=8, heads=2, num_classes=3,
                     head_widths=(16, 8), dropout=0.0)
    mw = init_weights(spec, 0, np.float64)
    pts = np.random.default_rng(0).normal(size=(2, 32, 3))
    nbr = knn(pts, spec.k).idx
    mhead = Tensor(np.random.default_rng(1).normal(size=(2, 3)))
    micro = nd.parameters_grad_report(lambda: nd.sum(forward(pts, spec, mw, local_index=nbr).logits * mhead),
                                      mw.trainable(), GRAD_EPS, max_coords=6, rng=np.random.default_rng(0),
                                      tol=MICRO_TOL)
    elapsed = time.perf_counter() - start
    passed = worst_op < GRAD_TOL and block < GRAD_TOL and micro.error < MICRO_TOL and elapsed < GRAD_BUDGET_S
    report(1, passed,
           f"{len(OPS) + 2} ops max rel err {worst_op:.2e} ({worst_name}); transformer block {block:.2e} "
           f"(< {GRAD_TOL:g}); micro model {micro.error:.2e} (< {MICRO_TOL:g}; {micro.probed} coords, "
           f"{micro.reprobed} re-probed at eps/10 after straddling a kink, raw {micro.raw_error:.2e}); "
           f"{elapsed:.1f}s (< {GRAD_BUDGET_S:g}s)")
    assert passed


def _oracle_instance(rng):
    n = int(rng.integers(8, 33))
    c = int(rng.choice([4, 8]))
    k = int(rng.integers(2, min(8, n - 1) + 1))
    m = int(rng.integers(1, n + 1))
    x = rng.normal(size=(c, n)).astype(np.float32)
    pts = rng.normal(size=(n, 3))
    gp = Projections.random(c, rng, dtype=np.float32)
    lp = Projections.random(c, rng, dtype=np.float32)
    return n, c, k, m, x, pts, gp, lp


def test_criterion_02_oracles(report):
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst = {}
    index_ok = True

    def note(name, got, ref):
        worst[name] = max(worst.get(name, 0.0), float(np.max(np.abs(np.asarray(got, np.float64) - ref))))

    for _ in range(ORACLE_INSTANCES):
        n, c, k, m, x, pts, gp, lp = _oracle_instance(rng)
        nbr = knn(pts, k).idx
        out, sel = global_downsample(Tensor(x[None]), m, gp)
        ref, idx, _, _ = oracles.global_oracle(x, *_f64(gp), m)
        index_ok &= np.array_equal(sel.idx[0], idx)
        note("global", out.data[0], ref)

        out, sel = local_downsample(Tensor(x[None]), pts, m, k, lp)
        ref, idx, _, _ = oracles.local_oracle(x, nbr, *_f64(lp), m)
        index_ok &= np.array_equal(sel.idx[0], idx)
        note("local", out.data[0], ref)

        for mode in ("shared_index", "independent_sum"):
            out, sel = global_local_downsample(Tensor(x[None]), pts, m, k, gp, lp, mode)
            ref, idx = oracles.gld_oracle(x, nbr, _f64(gp), _f64(lp), m, mode)
            index_ok &= np.array_equal(sel.idx[0], idx)
            note(f"gld/{mode}", out.data[0], ref)

        cm = correlation_matrix(Tensor(x), pts, k, gp, lp)
        note("correlation", cm.matrix, oracles.correlation_oracle(x, nbr, _f64(gp), _f64(lp)))

        heads = int(rng.choice([1, 2, 4]))
        mw = MHAWeights(*(Tensor((rng.normal(size=(c, c)) / np.sqrt(c)).astype(np.float32)) for _ in range(4)))
        tokens = x.T
        memory = rng.normal(size=(int(rng.integers(1, 33)), c)).astype(np.float32)
        got = multi_head_attention(Tensor(tokens), Tensor(memory), mw, heads).data
        note("mha", got, oracles.mha_oracle(tokens, memory, *(t.data.astype(np.float64) for t in mw.tensors()),
                                            heads))

        coarse = rng.normal(size=(int(rng.integers(1, 33)), 3))
        feats = rng.normal(size=(len(coarse), c)).astype(np.float32)
        note("upsample", upsample(feats, coarse, pts).data, oracles.upsample_oracle(feats, coarse, pts))
    elapsed = time.perf_counter() - start
    passed = index_ok and max(worst.values()) < ORACLE_TOL and elapsed < ORACLE_BUDGET_S
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    report(2, passed, f"{ORACLE_INSTANCES} instances (N<=32) each; max abs diff {detail} (< {ORACLE_TOL:g}); "
                      f"selections {'identical' if index_ok else 'DIFFER'}; {elapsed:.1f}s (< {ORACLE_BUDGET_S:g}s)")
    assert passed


def test_criterion_03_fps_and_knn(report):
    rng = np.random.default_rng(3)
    fps_ok = sum(np.array_equal(fps(p, 16, 0).idx, oracles.fps_brute(p, 16, 0))
                 for p in (rng.normal(size=(128, 3)) for _ in range(100)))
    knn_ok = 0
    for _ in range(50):
        p = rng.normal(size=(256, 3))
        ref = oracles.knn_brute(p, 16)
        knn_ok += np.array_equal(knn(p, 16, method="kdtree").idx, ref) and np.array_equal(knn(p, 16, "brute").idx, ref)
    passed = fps_ok == 100 and knn_ok == 50
    report(3, passed, f"fps identical on {fps_ok}/100 clouds (N=128, M=16); kdtree knn identical on "
                      f"{knn_ok}/50 clouds (N=256, K=16)")
    assert passed


def test_criterion_04_normalization(report):
    rng = np.random.default_rng(4)
    worst, pattern_ok = 0.0, True
    for _ in range(50):
        n, c, k, _, x, pts, gp, lp = _oracle_instance(rng)
        xt = Tensor(x.T[None])
        nbr = knn(pts, k).idx
        g_attn, _ = global_attention(xt, gp)
        l_attn, _ = local_attention(xt, nbr[None], lp)
        cm = correlation_matrix(Tensor(x), pts, k, gp, lp)
        g_sum, l_sum = cm.row_sums()
        for sums in (g_attn.data.sum(-1), l_attn.data.sum(-1), g_sum, l_sum):
            worst = max(worst, float(np.max(np.abs(sums - 1.0))))
        expected = np.zeros((n, n), dtype=bool)
        np.put_along_axis(expected, nbr, True, axis=1)
        pattern_ok &= np.array_equal(cm.local_part > 0, expected)
    passed = worst < SUM_TOL and pattern_ok
    report(4, passed, f"max |row sum - 1| {worst:.1e} over softmax rows and both correlation partitions "
                      f"(< {SUM_TOL:g}); local sparsity {'equals' if pattern_ok else 'DIFFERS from'} knn table "
                      f"on 50 instances")
    assert passed


def test_criterion_05_permutations(report):
    rng = np.random.default_rng(5)
    score_ok = 0
    for _ in range(20):
        n = int(rng.integers(8, 65))
        x = rng.normal(size=(1, 8, n))
        gp = Projections.random(8, rng)
        perm = rng.permutation(n)
        _, a = global_downsample(Tensor(x), 1, gp)
        _, b = global_downsample(Tensor(x[..., perm]), 1, gp)
        score_ok += np.array_equal(b.scores[0], a.scores[0][perm])

    block_dev = 0.0
    for seed in range(5):
        w = _block(c=8, heads=2, seed=seed)
        x = rng.normal(size=(2, 8, 12))
        perm = rng.permutation(12)
        a = transformer_attention(Tensor(x), w, "blk", 2).data
        b = transformer_attention(Tensor(x[..., perm]), w, "blk", 2).data
        block_dev = max(block_dev, float(np.max(np.abs(b - a[..., perm]))))

    spec = ModelSpec(n_points=64, stages=(64, 32, 16), k=8, width=32, embed_hidden=16, heads=4, num_classes=3,
                     head_widths=(32, 16))
    logits_ok = 0
    for seed in range(5):
        w = init_weights(spec, seed, np.float64)
        pts = rng.normal(size=(1, 64, 3))
        perm = rng.permutation(64)
        inverse = np.argsort(perm)
        near = knn(pts, spec.k).idx[0]
        far = random_distant(pts[0], near, spec.k, np.random.default_rng(seed)).idx
        a = forward(pts, spec, w, local_index=near[None], global_index=far[None]).logits.data
        b = forward(pts[:, perm], spec, w, local_index=inverse[near[perm]][None],
                    global_index=inverse[far[perm]][None]).logits.data
        logits_ok += a.tobytes() == b.tobytes()
    passed = score_ok == 20 and block_dev < 1e-12 and logits_ok == 5
    report(5, passed, f"global scores bit-identical under permutation {score_ok}/20 (f64); transformer block "
                      f"max deviation {block_dev:.1e} (< 1e-12, eval, f64); classification logits bit-identical "
                      f"{logits_ok}/5 with relabelled neighbor tables")
    assert passed


def _toy_runs(name, metric):
    cfg = preset(name)
    spec = cfg.model_spec()
    train, test = load_split(cfg["data"], "train"), load_split(cfg["data"], "test")
    scores, times = [], []
    for seed in range(TOY_SEEDS):
        start = time.perf_counter()
        result = fit(train, spec, dataclasses.replace(cfg.train_config(), seed=seed))
        scores.append(evaluate(result.weights, test, spec)[metric])
        times.append(time.perf_counter() - start)
        print(f"  {name} seed {seed}: {metric} {scores[-1]:.4f} ({times[-1]:.0f}s)", flush=True)
    return scores, sum(times)


@pytest.mark.slow
def test_criterion_06_toy_classification(report):
    scores, total = _toy_runs("toy_cls", "accuracy")
    hits = sum(s >= CLS_TARGET for s in scores)
    passed = hits >= TOY_PASSES and total <= TOY_BUDGET_S
    report(6, passed, f"final-epoch test accuracy {', '.join(f'{s:.3f}' for s in scores)}; {hits}/{TOY_SEEDS} "
                      f">= {CLS_TARGET:g} (need {TOY_PASSES}); {total / 60:.1f} min (<= {TOY_BUDGET_S / 60:g})")
    assert passed


@pytest.mark.slow
def test_criterion_07_toy_segmentation(report):
    scores, total = _toy_runs("toy_seg", "ins_miou")
    hits = sum(s >= SEG_TARGET for s in scores)
    passed = hits >= TOY_PASSES and total <= TOY_BUDGET_S
    report(7, passed, f"final-epoch test Ins.mIoU {', '.join(f'{s:.3f}' for s in scores)}; {hits}/{TOY_SEEDS} "
                      f">= {SEG_TARGET:g} (need {TOY_PASSES}); {total / 60:.1f} min (<= {TOY_BUDGET_S / 60:g})")
    assert passed


@pytest.mark.slow
def test_criterion_08_benchmark(report):
    train, test = load_split("synthetic", "train"), load_split("synthetic", "test")
    weights, spec, _ = load_checkpoint(checkpoint_path("toy_cls"))
    m_list = [128, 64, 32]
    start = time.perf_counter()
    base = run_benchmark(train, test, ["rs", "fps", "voxel", "gld-frozen"], m_list, BENCH_SEEDS)
    base_s = time.perf_counter() - start
    trained = run_benchmark(train, test, ["rs", "gld-trained"], m_list, BENCH_SEEDS, weights, spec)
    total_s = time.perf_counter() - start
    print(base.table())
    print(trained.table())
    gld, rs = trained.mean[1], trained.mean[0]
    directional = bool(np.all(gld >= rs))
    passed = base_s < BENCH_BUDGET_S and directional
    report(8, passed, f"4-method table in {base_s:.0f}s (< {BENCH_BUDGET_S:g}s); trained-gld vs rs "
                      f"({BENCH_SEEDS}-seed means) " + ", ".join(f"M={m}: {g:.3f} vs {r:.3f}"
                                                                 for m, g, r in zip(m_list, gld, rs))
           + f"; with trained run {total_s:.0f}s")
    assert passed


def test_criterion_09_schedule(report):
    first, last = cosine_lr(0, 10_000), cosine_lr(10_000, 10_000)
    lrs = np.array([cosine_lr(s, 10_000) for s in range(10_001)])
    monotone = bool(np.all(np.diff(lrs) <= 0))
    passed = first == 1e-4 and last == 1e-8 and monotone
    report(9, passed, f"lr(0)={first!r}, lr(T)={last!r}, non-increasing over 10^4 steps: {monotone}")
    assert passed


def test_criterion_10_determinism(report, tmp_path):
    src = tmp_path / "cube.xyz"
    write_cloud(PointCloud(make_synthetic("cube", 1024, 0.01, seed=0).points), src)
    samples = []
    for i in range(2):
        out = tmp_path / f"s{i}.bin"
        main(["sample", "--input", str(src), "--method", "gld", "--m", "256", "--seed", "7", "--out", str(out),
              "--export-scores", str(tmp_path / f"s{i}.csv")])
        samples.append(out.read_bytes() + (tmp_path / f"s{i}.csv").read_bytes())
    runs = []
    for i in range(2):
        run = tmp_path / f"run{i}"
        main(["train", "--config", "toy_cls", "--out-dir", str(run), "--set", "epochs=1", "--set", "eval_split="])
        runs.append((run / "train_log.csv").read_bytes() + (run / "last.heaw").read_bytes())
    passed = samples[0] == samples[1] and runs[0] == runs[1]
    report(10, passed, f"sample output {'byte-identical' if samples[0] == samples[1] else 'DIFFERS'}; one toy_cls "
                       f"fit epoch (log + weights) {'byte-identical' if runs[0] == runs[1] else 'DIFFERS'}")
    assert passed
