"""scikit-learn style estimators over the functional API.

Inputs are batches of equally sized clouds, ``X`` of shape (B, N, 3):

* :class:`HEANetClassifier` -- ``y`` holds one label per cloud.
* :class:`HEANetSegmenter` -- ``y`` holds one part label per point, (B, N).
* :class:`EdgeAwareSampler` -- a transformer reducing each cloud to ``m``
  points with any of the samplers.

All hyperparameters are constructor arguments (so ``get_params``,
``set_params`` and ``sklearn.base.clone`` work); fitted state lives in
trailing-underscore attributes.
"""

from __future__ import annotations

from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.exceptions import NotFittedError

from . import ndtensor as nd
from .checkpoint import load_checkpoint
from .exceptions import ConfigError
from .metrics import ins_miou
from .model import ModelSpec, stage_sizes
from .pcio import Dataset, PointCloud
from .sampling import METHODS, sample
from .train import TrainConfig, fit, predict_logits
from .validation import check_clouds, check_labels, check_positive_int, check_sample_count
from .weights import Weights


def _check_fitted(est, attr: str) -> None:
    if not hasattr(est, attr):
        raise NotFittedError(f"{type(est).__name__} is not fitted yet; call fit first")


class _HEANetBase(BaseEstimator):
    _task = "classification"

    def __init__(self, stages=None, k=16, width=64, embed_hidden=16, heads=4, head_widths=(128, 64),
                 fusion="shared_index", decoder_norm=True, epochs=30, batch=16, lr_init=1e-4, lr_final=1e-8,
                 weight_decay=1e-5, dropout=0.5, schedule="epoch", seed=0):
        self.stages = stages
        self.k = k
        self.width = width
        self.embed_hidden = embed_hidden
        self.heads = heads
        self.head_widths = head_widths
        self.fusion = fusion
        self.decoder_norm = decoder_norm
        self.epochs = epochs
        self.batch = batch
        self.lr_init = lr_init
        self.lr_final = lr_final
        self.weight_decay = weight_decay
        self.dropout = dropout
        self.schedule = schedule
        self.seed = seed

    def _spec(self, n_points: int, n_labels: int) -> ModelSpec:
        stages = tuple(self.stages) if self.stages is not None else stage_sizes(n_points, 2)
        counts = {"num_classes": n_labels} if self._task == "classification" else {"num_parts": n_labels}
        return ModelSpec(task=self._task, n_points=n_points, stages=stages, k=self.k, width=self.width,
                         embed_hidden=self.embed_hidden, heads=self.heads, head_widths=tuple(self.head_widths),
                         fusion=self.fusion, decoder_norm=self.decoder_norm, dropout=self.dropout, **counts)

    def _train_config(self) -> TrainConfig:
        return TrainConfig(lr_init=self.lr_init, lr_final=self.lr_final, epochs=self.epochs, batch=self.batch,
                           weight_decay=self.weight_decay, dropout=self.dropout, seed=self.seed,
                           task=self._task, schedule=self.schedule)

    def _logits(self, X) -> np.ndarray:
        _check_fitted(self, "weights_")
        pts = check_clouds(X, self.spec_.n_points)
        return predict_logits(pts, self.spec_, self.weights_, self.batch)

    @classmethod
    def from_checkpoint(cls, path):
        """Estimator wrapping a saved checkpoint (weights + spec sidecar)."""
        weights, spec, _ = load_checkpoint(path)
        if spec.task != cls._task:
            raise ConfigError(f"checkpoint is a {spec.task} model, not {cls._task}")
        est = cls(stages=spec.stages, k=spec.k, width=spec.width, embed_hidden=spec.embed_hidden,
                  heads=spec.heads, head_widths=spec.head_widths, fusion=spec.fusion,
                  decoder_norm=spec.decoder_norm, dropout=spec.dropout)
        est.spec_, est.weights_ = spec, weights
        n = spec.num_classes if spec.task == "classification" else spec.num_parts
        est._set_labels(np.arange(n))
        return est


class HEANetClassifier(ClassifierMixin, _HEANetBase):
    """Point cloud classifier.

    Labels may be any sortable values; they are encoded as indices into
    ``classes_``. ``stages`` defaults to two halvings of the input size.

    Example:
        >>> clf = HEANetClassifier(epochs=5).fit(X_train, y_train)  # doctest: +SKIP
        >>> clf.score(X_test, y_test)  # doctest: +SKIP
    """

    _task = "classification"

    def _set_labels(self, classes) -> None:
        self.classes_ = np.asarray(classes)

    def fit(self, X, y):
        pts = check_clouds(X)
        y = np.asarray(y)
        if y.shape != (pts.shape[0],):
            raise ConfigError(f"y must have shape ({pts.shape[0]},), got {y.shape}")
        self.classes_, encoded = np.unique(y, return_inverse=True)
        self.spec_ = self._spec(pts.shape[1], len(self.classes_))
        names = [str(c) for c in self.classes_]
        ds = Dataset([PointCloud(p, None, int(c)) for p, c in zip(pts, encoded)], names)
        result = fit(ds, self.spec_, self._train_config())
        self.weights_: Weights = result.weights
        self.history_ = result.history
        self.n_features_in_ = 3
        return self

    def predict_proba(self, X) -> np.ndarray:
        logits = self._logits(X).astype(np.float64)
        with nd.no_grad():
            return nd.softmax(nd.Tensor(logits), axis=1).data

    def predict(self, X) -> np.ndarray:
        logits = self._logits(X)
        return self.classes_[np.argmax(logits, axis=1)]


class HEANetSegmenter(_HEANetBase):
    """Per-point part labeling; ``score`` is the instance-averaged mIoU.

    Part labels must be integers in ``[0, n_parts)``; ``n_parts`` defaults to
    one more than the largest training label.
    """

    _task = "segmentation"

    def __init__(self, stages=None, k=16, width=96, embed_hidden=16, heads=4, head_widths=(128, 64),
                 fusion="shared_index", decoder_norm=True, epochs=30, batch=16, lr_init=1e-4, lr_final=1e-8,
                 weight_decay=1e-5, dropout=0.5, schedule="epoch", seed=0, n_parts=None):
        super().__init__(stages, k, width, embed_hidden, heads, head_widths, fusion, decoder_norm, epochs, batch,
                         lr_init, lr_final, weight_decay, dropout, schedule, seed)
        self.n_parts = n_parts

    def _set_labels(self, parts) -> None:
        self.n_parts_ = len(parts)

    def fit(self, X, y):
        pts = check_clouds(X)
        y = check_labels(y, pts.shape[:2], self.n_parts)
        self.n_parts_ = int(self.n_parts) if self.n_parts is not None else int(y.max()) + 1
        self.spec_ = self._spec(pts.shape[1], self.n_parts_)
        ds = Dataset([PointCloud(p, lab, 0) for p, lab in zip(pts, y)], ["object"],
                     {"object": [str(i) for i in range(self.n_parts_)]})
        result = fit(ds, self.spec_, self._train_config())
        self.weights_ = result.weights
        self.history_ = result.history
        self.n_features_in_ = 3
        return self

    def predict(self, X) -> np.ndarray:
        return np.argmax(self._logits(X), axis=1)

    def score(self, X, y) -> float:
        pred = self.predict(X)
        y = check_labels(y, pred.shape, self.n_parts_)
        parts = [list(range(self.n_parts_))] * len(pred)
        return ins_miou(list(pred), list(y), parts)


class EdgeAwareSampler(TransformerMixin, BaseEstimator):
    """Reduce every cloud to ``m`` points.

    Args:
        method: ``gld``, ``global``, ``local`` (attention samplers) or ``rs``,
            ``fps``, ``voxel``.
        m: Points kept per cloud.
        k: Local neighborhood size of the attention samplers.
        seed: Sampler randomness; without ``weights`` it also seeds the
            frozen random projections.
        weights: Optional checkpoint path or :class:`Weights` with trained
            ``embed.*`` / ``stage1.*`` parameters.

    ``transform`` returns (B, m, 3); the chosen indices are kept in
    ``indices_`` and :meth:`score_samples` exposes per-point scores.
    """

    def __init__(self, method="gld", m=128, k=16, seed=0, weights=None):
        self.method = method
        self.m = m
        self.k = k
        self.seed = seed
        self.weights = weights

    def _weights(self) -> Optional[Weights]:
        if self.weights is None or isinstance(self.weights, Weights):
            return self.weights
        return load_checkpoint(self.weights)[0]

    def fit(self, X, y=None):
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; choose from {', '.join(METHODS)}")
        pts = check_clouds(X)
        check_sample_count(self.m, pts.shape[1])
        check_positive_int(self.k, "k")
        self.weights_ = self._weights()
        self.n_features_in_ = 3
        return self

    def _selections(self, X):
        _check_fitted(self, "n_features_in_")
        pts = check_clouds(X)
        m = check_sample_count(self.m, pts.shape[1])
        return pts, [sample(p, self.method, m, self.k, self.seed, self.weights_) for p in pts]

    def transform(self, X) -> np.ndarray:
        pts, sels = self._selections(X)
        self.indices_ = np.stack([s.idx for s in sels])
        return np.take_along_axis(pts, self.indices_[..., None], axis=1)

    def score_samples(self, X) -> np.ndarray:
        """Per-point selection scores (B, N); higher is picked first."""
        _, sels = self._selections(X)
        return np.stack([s.scores for s in sels])
