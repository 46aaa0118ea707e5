import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from heanet.estimators import EdgeAwareSampler, HEANetClassifier, HEANetSegmenter
from heanet.exceptions import ArgumentError, ConfigError, DataError, DimensionError
from heanet.pcio import make_synthetic_dataset

SMALL = dict(stages=(32, 16, 8), k=4, width=16, embed_hidden=8, heads=2, head_widths=(16, 8), epochs=1, batch=4)


@pytest.fixture(scope="module")
def clouds():
    pts, labels, _ = make_synthetic_dataset(n_clouds=9, n_points=32, seed=0).stack()
    return pts, labels


class TestClassifier:
    def test_params_and_clone(self):
        clf = HEANetClassifier(width=32, epochs=3)
        params = clf.get_params()
        assert params["width"] == 32 and params["epochs"] == 3
        twin = clone(clf)
        assert twin.get_params() == params and twin is not clf
        assert clf.set_params(k=8).k == 8

    def test_fit_predict(self, clouds):
        pts, labels = clouds
        names = np.array(["sphere", "cube", "torus"])[labels]
        clf = HEANetClassifier(**SMALL).fit(pts, names)
        assert set(clf.classes_) == set(names)
        pred = clf.predict(pts)
        assert pred.shape == (9,) and set(pred) <= set(names)
        proba = clf.predict_proba(pts)
        np.testing.assert_allclose(proba.sum(axis=1), 1.0)
        assert 0.0 <= clf.score(pts, names) <= 1.0
        assert len(clf.history_) == 1

    def test_deterministic(self, clouds):
        pts, labels = clouds
        a = HEANetClassifier(**SMALL).fit(pts, labels).predict_proba(pts)
        b = HEANetClassifier(**SMALL).fit(pts, labels).predict_proba(pts)
        np.testing.assert_array_equal(a, b)

    def test_not_fitted(self, clouds):
        with pytest.raises(NotFittedError):
            HEANetClassifier().predict(clouds[0])

    def test_bad_labels(self, clouds):
        with pytest.raises(ConfigError):
            HEANetClassifier(**SMALL).fit(clouds[0], [0, 1])

    def test_wrong_point_count(self, clouds):
        clf = HEANetClassifier(**SMALL).fit(*clouds)
        with pytest.raises(DimensionError):
            clf.predict(np.zeros((1, 16, 3)))

    def test_from_checkpoint(self):
        from importlib import resources
        path = resources.files("heanet").joinpath("checkpoints/toy_cls.heaw")
        clf = HEANetClassifier.from_checkpoint(str(path))
        pts = make_synthetic_dataset(n_clouds=3, n_points=256, seed=0, split="test").stack()[0]
        assert clf.predict(pts).shape == (3,)
        with pytest.raises(ConfigError):
            HEANetSegmenter.from_checkpoint(str(path))


class TestSegmenter:
    def test_fit_predict_score(self):
        pts, _, parts = make_synthetic_dataset(("cube",), n_clouds=4, n_points=32, seed=0, with_parts=True).stack()
        seg = HEANetSegmenter(**SMALL).fit(pts, parts)
        assert seg.n_parts_ == 6
        assert seg.predict(pts).shape == (4, 32)
        assert 0.0 <= seg.score(pts, parts) <= 1.0

    def test_label_validation(self):
        pts = np.random.default_rng(0).normal(size=(2, 32, 3))
        with pytest.raises(DataError):
            HEANetSegmenter(**SMALL, n_parts=2).fit(pts, np.full((2, 32), 3))
        with pytest.raises(DimensionError):
            HEANetSegmenter(**SMALL).fit(pts, np.zeros((2, 31), int))


class TestSampler:
    @pytest.mark.parametrize("method", ["gld", "global", "local", "rs", "fps", "voxel"])
    def test_transform_shape_and_subset(self, method):
        pts = np.random.default_rng(0).normal(size=(2, 64, 3))
        sampler = EdgeAwareSampler(method=method, m=16, k=8).fit(pts)
        out = sampler.transform(pts)
        assert out.shape == (2, 16, 3)
        for b in range(2):
            assert len(set(sampler.indices_[b])) == 16
            np.testing.assert_array_equal(out[b], pts[b][sampler.indices_[b]])

    def test_scores(self):
        pts = np.random.default_rng(1).normal(size=(1, 40, 3))
        scores = EdgeAwareSampler(m=5, k=6).fit(pts).score_samples(pts)
        assert scores.shape == (1, 40)

    def test_validation(self):
        pts = np.zeros((1, 10, 3))
        with pytest.raises(ArgumentError):
            EdgeAwareSampler(m=11).fit(pts)
        with pytest.raises(ConfigError):
            EdgeAwareSampler(method="magic").fit(pts)
        with pytest.raises(NotFittedError):
            EdgeAwareSampler().transform(pts)
        with pytest.raises(DataError):
            EdgeAwareSampler(m=2).fit(np.full((1, 10, 3), np.nan))

    def test_clone_keeps_params(self):
        est = EdgeAwareSampler(method="fps", m=7, seed=3)
        assert clone(est).get_params() == est.get_params()
