"""scikit-learn style wrapper around a lookup network."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.multiclass import unique_labels
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .data import Dataset, DatasetSpec
from .functional import softmax
from .models import build_network
from .train import TrainConfig, predict_logits, train


class LookupNetClassifier(ClassifierMixin, BaseEstimator):
    """Classifier backed by a lookup network.

    ``X`` is either 2-D (samples x features, trained as a network of 1x1
    lookup layers) or 4-D (N x C x H x W images).
    """

    def __init__(self, arch="toy-mlp", n_f=33, n_w=33, table_mode="cumulative", grad_rescale=True,
                 exponential_scales=True, epochs=20, batch_size=32, lr=0.05, weight_decay=5e-4,
                 augment=False, random_state=0):
        self.arch = arch
        self.n_f = n_f
        self.n_w = n_w
        self.table_mode = table_mode
        self.grad_rescale = grad_rescale
        self.exponential_scales = exponential_scales
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.weight_decay = weight_decay
        self.augment = augment
        self.random_state = random_state

    def _check_X(self, X):
        X = check_array(X, allow_nd=True, dtype=np.float32)
        if X.ndim not in (2, 4):
            raise ValueError(f"expected 2-D or 4-D input, got {X.ndim}-D")
        return X

    def fit(self, X, y):
        X, y = check_X_y(X, y, allow_nd=True, dtype=np.float32)
        X = self._check_X(X)
        self.classes_ = unique_labels(y)
        y_idx = np.searchsorted(self.classes_, y)
        self.n_features_in_ = X.shape[1]
        self.input_shape_ = X.shape[1:]
        self.network_ = build_network(arch=self.arch, in_channels=X.shape[1], num_classes=len(self.classes_),
                                      n_f=self.n_f, n_w=self.n_w, table_mode=self.table_mode,
                                      grad_rescale=self.grad_rescale,
                                      exponential_scales=self.exponential_scales, seed=self.random_state,
                                      input_shape=self.input_shape_)
        data = Dataset(DatasetSpec("array", len(self.classes_), len(y), 0), X, y_idx.astype(np.int64),
                       X[:0], y_idx[:0].astype(np.int64))
        config = TrainConfig(epochs=self.epochs, batch_size=self.batch_size, lr=self.lr,
                             weight_decay=self.weight_decay, augment=self.augment, seed=self.random_state)
        self.history_ = train(self.network_, data, config).metrics
        return self

    def decision_function(self, X):
        check_is_fitted(self, "network_")
        X = self._check_X(X)
        if X.shape[1:] != tuple(self.input_shape_):
            raise ValueError(f"expected samples of shape {tuple(self.input_shape_)}, got {X.shape[1:]}")
        return predict_logits(self.network_, X)

    def predict_proba(self, X):
        return softmax(self.decision_function(X).astype(np.float64))

    def predict(self, X):
        check_is_fitted(self, "network_")
        return self.classes_[self.decision_function(X).argmax(axis=1)]
