import numpy as np
import pytest

from heanet import ndtensor as nd
from heanet.downsample import (
    CorrelationMatrix,
    Projections,
    correlation_matrix,
    fps,
    global_downsample,
    global_local_downsample,
    global_scores,
    load_correlation,
    local_downsample,
    local_scores,
    random_sample,
    top_m,
    voxel_sample,
    zscore,
)
from heanet.exceptions import ArgumentError, ConfigError, FormatError, SizeError
from heanet.ndtensor import Tensor, parameters_grad_check
from heanet.neighbors import knn
from heanet.pcio import cube_edge_distance, make_synthetic
from heanet.sampling import attention_scores, init_sampler_weights

import oracles

TOL = 1e-5


def _instance(n, c, seed, dtype=np.float32):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(c, n)).astype(dtype)
    pts = rng.normal(size=(n, 3))
    return x, pts, Projections.random(c, rng, dtype=dtype), Projections.random(c, rng, dtype=dtype)


def _mats(proj):
    return tuple(np.asarray(t.data, dtype=np.float64) for t in (proj.query, proj.key, proj.value))


class TestGlobal:
    def test_column_sum_toy(self):
        u = global_scores(np.array([[0.5, 0.5], [0.1, 0.9]]))
        np.testing.assert_allclose(u, [0.6, 1.4])
        assert top_m(u, 1).tolist() == [1]

    def test_uniform_attention_tie_break(self):
        x = Tensor(np.ones((1, 4, 10), dtype=np.float32))
        _, sel = global_downsample(x, 3, Projections.random(4, np.random.default_rng(0), dtype=np.float32))
        assert sel.idx.tolist() == [[0, 1, 2]]

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_loop_oracle(self, seed):
        x, _, gp, _ = _instance(16, 8, seed)
        out, sel = global_downsample(Tensor(x[None]), 4, gp)
        ref, idx, u, _ = oracles.global_oracle(x, *_mats(gp), 4)
        np.testing.assert_array_equal(sel.idx[0], idx)
        np.testing.assert_allclose(sel.scores[0], u, atol=TOL)
        np.testing.assert_allclose(out.data[0], ref, atol=TOL)

    def test_m_larger_than_n(self):
        x, _, gp, _ = _instance(6, 4, 0)
        with pytest.raises(ArgumentError):
            global_downsample(Tensor(x[None]), 7, gp)

    def test_zero_width_projection(self):
        x = Tensor(np.ones((1, 4, 6)))
        empty = Projections(Tensor(np.zeros((4, 0))), Tensor(np.zeros((4, 0))), Tensor(np.zeros((4, 4))))
        with pytest.raises(ConfigError):
            global_downsample(x, 2, empty)

    def test_scores_permutation_equivariant(self):
        x, _, gp, _ = _instance(20, 6, 1, np.float64)
        perm = np.random.default_rng(2).permutation(20)
        _, a = global_downsample(Tensor(x[None]), 1, Projections(*(Tensor(t.data.astype(np.float64))
                                                                    for t in gp.tensors())))
        _, b = global_downsample(Tensor(x[None][..., perm]), 1, Projections(*(Tensor(t.data.astype(np.float64))
                                                                              for t in gp.tensors())))
        np.testing.assert_array_equal(b.scores[0], a.scores[0][perm])

    def test_scalar_head_grad(self):
        rng = np.random.default_rng(3)
        x = Tensor(rng.normal(size=(1, 4, 8)), requires_grad=True)
        gp = Projections.random(4, rng)
        head = Tensor(rng.normal(size=(1, 4, 3)))
        err = parameters_grad_check(lambda: nd.sum(global_downsample(x, 3, gp)[0] * head), [x] + gp.tensors())
        assert err < 1e-4


class TestLocal:
    def test_hand_std(self):
        assert local_scores(np.array([[0.9, 0.1]]))[0] == pytest.approx(0.4)

    def test_identical_features_tie_break(self):
        x = Tensor(np.ones((1, 4, 10), dtype=np.float32))
        pts = np.random.default_rng(0).normal(size=(10, 3))
        _, sel = local_downsample(x, pts, 4, 3, Projections.random(4, np.random.default_rng(1), dtype=np.float32))
        np.testing.assert_array_equal(sel.scores, 0.0)
        assert sel.idx.tolist() == [[0, 1, 2, 3]]

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_loop_oracle(self, seed):
        x, pts, _, lp = _instance(16, 8, seed)
        nbr = knn(pts, 4).idx
        out, sel = local_downsample(Tensor(x[None]), pts, 4, 4, lp)
        ref, idx, s, _ = oracles.local_oracle(x, nbr, *_mats(lp), 4)
        np.testing.assert_array_equal(sel.idx[0], idx)
        np.testing.assert_allclose(sel.scores[0], s, atol=TOL)
        np.testing.assert_allclose(out.data[0], ref, atol=TOL)

    def test_scores_equivariant_given_permuted_tables(self):
        x, pts, _, lp = _instance(20, 6, 4, np.float64)
        perm = np.random.default_rng(5).permutation(20)
        _, a = local_downsample(Tensor(x[None]), pts, 1, 5, lp)
        _, b = local_downsample(Tensor(x[None][..., perm]), pts[perm], 1, 5, lp)
        np.testing.assert_array_equal(b.scores[0], a.scores[0][perm])

    def test_grad(self):
        rng = np.random.default_rng(6)
        x = Tensor(rng.normal(size=(1, 4, 8)), requires_grad=True)
        pts = rng.normal(size=(8, 3))
        lp = Projections.random(4, rng)
        head = Tensor(rng.normal(size=(1, 4, 3)))
        err = parameters_grad_check(lambda: nd.sum(local_downsample(x, pts, 3, 3, lp)[0] * head), [x] + lp.tensors())
        assert err < 1e-4


class TestGlobalLocal:
    @pytest.mark.parametrize("mode", ["shared_index", "independent_sum"])
    @pytest.mark.parametrize("seed", range(3))
    def test_matches_loop_oracle(self, mode, seed):
        x, pts, gp, lp = _instance(16, 8, seed)
        nbr = knn(pts, 4).idx
        out, sel = global_local_downsample(Tensor(x[None]), pts, 5, 4, gp, lp, mode)
        ref, idx = oracles.gld_oracle(x, nbr, _mats(gp), _mats(lp), 5, mode)
        np.testing.assert_array_equal(sel.idx[0], idx)
        np.testing.assert_allclose(out.data[0], ref, atol=TOL)

    def test_opposite_outputs_cancel(self):
        rng = np.random.default_rng(0)
        x = Tensor(np.tile(rng.normal(size=(4, 1)), (1, 12))[None])
        gp = Projections.random(4, rng)
        lp = Projections(gp.query, gp.key, Tensor(-gp.value.data))
        out, _ = global_local_downsample(x, rng.normal(size=(12, 3)), 4, 3, gp, lp, "independent_sum")
        np.testing.assert_allclose(out.data, 0.0, atol=1e-12)

    def test_independent_sum_reports_global_selection(self):
        x, pts, gp, lp = _instance(16, 8, 2)
        _, g = global_downsample(Tensor(x[None]), 5, gp)
        _, sel = global_local_downsample(Tensor(x[None]), pts, 5, 4, gp, lp, "independent_sum")
        np.testing.assert_array_equal(sel.idx, g.idx)

    def test_shared_index_unique_subset(self):
        x, pts, gp, lp = _instance(32, 8, 3)
        _, sel = global_local_downsample(Tensor(x[None]), pts, 12, 6, gp, lp)
        assert len(set(sel.idx[0])) == 12 and sel.idx.max() < 32

    def test_unknown_mode(self):
        x, pts, gp, lp = _instance(8, 4, 0)
        with pytest.raises(ConfigError):
            global_local_downsample(Tensor(x[None]), pts, 2, 3, gp, lp, "concat")

    def test_zscore_constant(self):
        np.testing.assert_array_equal(zscore(np.ones((2, 5))), 0.0)

    def test_grad_shared_index(self):
        rng = np.random.default_rng(7)
        x = Tensor(rng.normal(size=(1, 4, 8)), requires_grad=True)
        pts = rng.normal(size=(8, 3))
        gp, lp = Projections.random(4, rng), Projections.random(4, rng)
        head = Tensor(rng.normal(size=(1, 4, 3)))
        err = parameters_grad_check(lambda: nd.sum(global_local_downsample(x, pts, 3, 3, gp, lp)[0] * head),
                                    [x] + gp.tensors() + lp.tensors())
        assert err < 1e-4


class TestCorrelation:
    def test_matches_oracle_and_normalizes(self):
        x, pts, gp, lp = _instance(8, 4, 1)
        cm = correlation_matrix(Tensor(x), pts, 3, gp, lp)
        ref = oracles.correlation_oracle(x, knn(pts, 3).idx, _mats(gp), _mats(lp))
        np.testing.assert_allclose(cm.matrix, ref, atol=TOL)
        g, l_sums = cm.row_sums()
        np.testing.assert_allclose(g, 1.0, atol=TOL)
        np.testing.assert_allclose(l_sums, 1.0, atol=TOL)

    def test_scatter_pattern(self):
        x, pts, gp, lp = _instance(20, 4, 2)
        cm = correlation_matrix(Tensor(x), pts, 4, gp, lp)
        pattern = cm.local_part > 0
        expected = np.zeros((20, 20), dtype=bool)
        np.put_along_axis(expected, knn(pts, 4).idx, True, axis=1)
        np.testing.assert_array_equal(pattern, expected)

    def test_cap(self):
        x, pts, gp, lp = _instance(10, 4, 0)
        with pytest.raises(SizeError):
            correlation_matrix(Tensor(x), pts, 3, gp, lp, cap=9)

    def test_file_round_trip(self, tmp_path):
        x, pts, gp, lp = _instance(6, 4, 0)
        cm = correlation_matrix(Tensor(x), pts, 2, gp, lp)
        cm.save(tmp_path / "c.heac")
        assert (tmp_path / "c.heac").stat().st_size == 12 + 6 * 12 * 4
        np.testing.assert_allclose(load_correlation(tmp_path / "c.heac"), cm.matrix, atol=1e-7)
        (tmp_path / "bad.heac").write_bytes(b"HEAC0001" + (7).to_bytes(4, "little"))
        with pytest.raises(FormatError):
            load_correlation(tmp_path / "bad.heac")

    def test_partitions(self):
        cm = CorrelationMatrix(np.arange(8.0).reshape(2, 4), np.zeros((2, 1), dtype=int))
        assert cm.global_part.shape == cm.local_part.shape == (2, 2)


class TestBaselines:
    def test_fps_square_corners(self):
        square = np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0]])
        sel = fps(square, 2, start=0)
        assert square[sel.idx[1]].tolist() == [1, 1, 0]

    @pytest.mark.parametrize("seed", range(5))
    def test_fps_matches_brute_force(self, seed):
        pts = np.random.default_rng(seed).normal(size=(64, 3))
        np.testing.assert_array_equal(fps(pts, 10).idx, oracles.fps_brute(pts, 10))

    def test_fps_min_distance_non_increasing(self):
        pts = np.random.default_rng(0).normal(size=(200, 3))
        sel = fps(pts, 50)
        d = sel.scores[sel.idx[1:]]
        assert np.all(np.diff(d) <= 0)

    def test_fps_bad_start(self):
        with pytest.raises(ArgumentError):
            fps(np.zeros((4, 3)), 2, start=4)

    def test_random_sample_unique_and_reproducible(self):
        pts = np.zeros((50, 3))
        a = random_sample(pts, 20, np.random.default_rng(3)).idx
        assert len(set(a)) == 20
        np.testing.assert_array_equal(a, random_sample(pts, 20, np.random.default_rng(3)).idx)

    @pytest.mark.parametrize("m", [1, 7, 32, 100])
    def test_voxel_unique(self, m):
        pts = np.random.default_rng(1).uniform(-1, 1, size=(100, 3))
        idx = voxel_sample(pts, m).idx
        assert len(idx) == m and len(set(idx)) == m

    def test_voxel_duplicates_fill(self):
        pts = np.zeros((10, 3))
        assert sorted(voxel_sample(pts, 4).idx) == [0, 1, 2, 3]


def test_csv_lists_selected_first(tmp_path):
    x, pts, gp, lp = _instance(10, 4, 0)
    _, sel = global_local_downsample(Tensor(x[None]), pts, 3, 3, gp, lp)
    sel.to_csv(tmp_path / "s.csv")
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert lines[0] == "index,score,selected" and len(lines) == 11
    assert [int(r.split(",")[0]) for r in lines[1:4]] == sel.idx[0].tolist()
    assert all(r.endswith(",1") for r in lines[1:4]) and all(r.endswith(",0") for r in lines[4:])


def test_edge_points_score_higher_on_cube():
    pts = make_synthetic("cube", 1024, 0.0, seed=0).points
    near_edge = cube_edge_distance(pts) < 0.05
    edge, interior = [], []
    for seed in range(20):
        s = attention_scores(pts, "local", 16, init_sampler_weights(seed), np.random.default_rng(seed))[0]
        edge.append(s[near_edge].mean())
        interior.append(s[~near_edge].mean())
    assert np.mean(edge) > np.mean(interior)
