"""Scikit-learn estimator facade over the training loop.

``QuICClassifier`` composes with the wider sklearn ecosystem: it follows
the ``fit`` / ``predict`` / ``predict_proba`` / ``score`` contract, keeps
its constructor side-effect free so ``clone`` and ``get_params`` work,
and validates inputs with the standard helpers.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .backbones import BackboneSpec
from .data import SplitDataset
from .errors import ConfigError
from .heads import HeadKind
from .tensor import no_grad
from .training import Tensor, TrainConfig, train


class QuICClassifier(ClassifierMixin, BaseEstimator):
    """Classifier with selectable head and backbone.

    Parameters mirror the training configuration. ``head`` picks one of
    ``fc``, ``gap``, ``se``, ``quic``, ``bcnn_oracle``; ``backbone`` one
    of ``identity``, ``mlp``, ``tiny_cnn``. Flat feature matrices suit
    the identity and mlp backbones; ``tiny_cnn`` expects
    ``(n_samples, channels, height, width)`` arrays.
    """

    def __init__(self, head="quic", backbone="identity", epochs=50, lr=0.001,
                 momentum=0.9, weight_decay=1e-4, batch_size=16,
                 lr_decay_factor=0.1, lr_decay_every=15, l2_normalize=False,
                 a_init="zeros", bn_enabled=True, se_reduction=16,
                 random_state=0):
        self.head = head
        self.backbone = backbone
        self.epochs = epochs
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.lr_decay_factor = lr_decay_factor
        self.lr_decay_every = lr_decay_every
        self.l2_normalize = l2_normalize
        self.a_init = a_init
        self.bn_enabled = bn_enabled
        self.se_reduction = se_reduction
        self.random_state = random_state

    def _config(self):
        return TrainConfig(
            lr0=self.lr, momentum=self.momentum, weight_decay=self.weight_decay,
            batch_size=self.batch_size, epochs=self.epochs,
            lr_decay_factor=self.lr_decay_factor, lr_decay_every=self.lr_decay_every,
            seed=self.random_state, head=HeadKind(self.head),
            backbone=BackboneSpec(kind=self.backbone),
            l2_normalize=self.l2_normalize, a_init=self.a_init,
            bn_enabled=self.bn_enabled, se_reduction=self.se_reduction)

    def _validate_features(self, X, reset):
        allow_nd = self.backbone == "tiny_cnn"
        X = check_array(X, allow_nd=allow_nd, dtype=np.float32)
        if self.backbone == "tiny_cnn" and X.ndim != 4:
            raise ConfigError(
                f"backbone 'tiny_cnn' expects 4-d image input, got {X.ndim}-d")
        if reset:
            self.n_features_in_ = X.shape[1]
        elif X.shape[1] != self.n_features_in_:
            raise ConfigError(
                f"X has {X.shape[1]} features, but this estimator was "
                f"fitted with {self.n_features_in_}")
        return X

    def fit(self, X, y):
        X, y = check_X_y(X, y, allow_nd=self.backbone == "tiny_cnn",
                         dtype=np.float32)
        self.classes_, y_idx = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise ConfigError("need at least 2 classes in y")
        self.n_features_in_ = X.shape[1]
        n = len(X)
        data = SplitDataset(
            inputs=X, labels=y_idx.astype(np.int64),
            num_classes=len(self.classes_),
            train_indices=np.arange(n),
            test_indices=np.arange(0),
            meta={"kind": "memory"})
        result = train(data, self._config())
        self.model_ = result.model
        self.train_log_ = result.log
        return self

    def decision_function(self, X):
        check_is_fitted(self, "model_")
        X = self._validate_features(X, reset=False)
        chunks = []
        with no_grad():
            for start in range(0, len(X), 256):
                batch = Tensor(X[start:start + 256])
                chunks.append(self.model_.forward(batch, mode="eval").data)
        return np.concatenate(chunks, axis=0)

    def predict(self, X):
        logits = self.decision_function(X)
        return self.classes_[logits.argmax(axis=1)]

    def predict_proba(self, X):
        logits = self.decision_function(X).astype(np.float64)
        shifted = logits - logits.max(axis=1, keepdims=True)
        expd = np.exp(shifted)
        return expd / expd.sum(axis=1, keepdims=True)
