"""scikit-learn style wrapper: ``fit`` pretrains on source data, ``adapt``
streams target data once with simulated pseudo-labels."""

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .exceptions import InvalidInputError, ShapeError
from .harness import RunConfig, h_score, predict, run_stream
from .losses import LossConfig
from .model import ModelConfig, OptimConfig, forward, pretrain_source
from .plsim import UNKNOWN, PseudoLabelConfig
from .scenario import LabeledDataset


class OnlineAdaptationClassifier(ClassifierMixin, BaseEstimator):
    """MLP source classifier with open-set rejection and online adaptation.

    ``predict`` returns one of ``classes_`` or ``unknown_label`` for samples
    whose normalized prediction entropy reaches ``rejection_threshold``.
    """

    def __init__(self, hidden_dim=64, feature_dim=64, projection_dim=128, epochs=30,
                 batch_size=64, learning_rate=0.001, momentum=0.9, loss="contrastive",
                 quality=100.0, quantity=100.0, alpha=1.0, rejection_threshold=0.5,
                 unknown_label=-1, random_state=0):
        self.hidden_dim = hidden_dim
        self.feature_dim = feature_dim
        self.projection_dim = projection_dim
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.loss = loss
        self.quality = quality
        self.quantity = quantity
        self.alpha = alpha
        self.rejection_threshold = rejection_threshold
        self.unknown_label = unknown_label
        self.random_state = random_state

    def _optim(self):
        return OptimConfig(self.learning_rate, self.momentum)

    def fit(self, X, y):
        X, y = check_X_y(X, y)
        self.classes_ = np.unique(y)
        if self.unknown_label in self.classes_:
            raise InvalidInputError(f"unknown_label {self.unknown_label!r} is also a class")
        config = ModelConfig(X.shape[1], self.hidden_dim, self.feature_dim,
                             len(self.classes_), self.projection_dim)
        self.model_ = pretrain_source(config, X, np.searchsorted(self.classes_, y),
                                      self.random_state, self.epochs, self.batch_size,
                                      self._optim())
        self.n_features_in_ = X.shape[1]
        return self

    def _check(self, X):
        check_is_fitted(self, "model_")
        X = check_array(X)
        if X.shape[1] != self.n_features_in_:
            raise ShapeError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        return X

    def predict_proba(self, X):
        X = self._check(X)
        return forward(self.model_, X, with_projection=False).probs

    def predict(self, X):
        idx = predict(self.predict_proba(X), self.rejection_threshold)
        out = np.empty(idx.shape[0], dtype=np.result_type(self.classes_, np.asarray(self.unknown_label)))
        known = idx != UNKNOWN
        out[known] = self.classes_[idx[known]]
        out[~known] = self.unknown_label
        return out

    def _encode(self, y):
        y = np.asarray(y)
        pos = np.searchsorted(self.classes_, y)
        pos = np.minimum(pos, len(self.classes_) - 1)
        return np.where(self.classes_[pos] == y, pos, UNKNOWN)

    def adapt(self, X, y):
        """Adapt online on the stream ``X`` in row order, in place.

        ``y`` holds the true labels and only drives the pseudo-label
        simulator; values outside ``classes_`` are target-private. The
        metrics of the stream are stored in ``stream_metrics_``.
        """
        X = self._check(X)
        target = LabeledDataset(X, self._encode(y))
        cfg = RunConfig(
            batch_size=self.batch_size,
            rejection_threshold=self.rejection_threshold,
            loss=LossConfig(kind=self.loss),
            pseudo=PseudoLabelConfig(self.quantity, self.quality, self.alpha),
            optim=self._optim(),
        )
        self.stream_metrics_ = run_stream(self.model_, target, cfg, inplace=True)
        return self

    def score(self, X, y, sample_weight=None):
        """H-score when ``y`` contains unseen classes, plain accuracy otherwise."""
        X = self._check(X)
        truth = self._encode(y)
        pred = predict(self.predict_proba(X), self.rejection_threshold)
        hit = pred == truth
        if sample_weight is None:
            sample_weight = np.ones(len(hit))
        w = np.asarray(sample_weight, dtype=np.float64)
        known = truth != UNKNOWN
        if known.all():
            return float(np.average(hit, weights=w))
        acc_k = np.average(hit[known], weights=w[known]) if known.any() else 0.0
        acc_u = np.average(hit[~known], weights=w[~known])
        return h_score(float(acc_k), float(acc_u))
