"""Scikit-learn-compatible front end for quantized-model training.

`LsqClassifier` wraps the build/train/evaluate pipeline behind the
standard fit/predict estimator API so it slots into sklearn pipelines,
grid searches, and cross-validation. Only the flat-input (MLP)
architecture is exposed here; convolutional models are driven through
the CLI and config files.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.exceptions import NotFittedError
from sklearn.utils.validation import check_array, check_X_y

from .data import Dataset
from .layers import ModelConfig, build_model
from .tensor import Tensor, log_softmax
from .trainer import RunConfig, default_lr, default_weight_decay, train


class LsqClassifier(BaseEstimator, ClassifierMixin):
    """Quantization-aware MLP classifier with learned step sizes.

    Parameters
    ----------
    bits : int or None
        Interior layer precision (2, 3, 4, or 8); None trains in full
        precision.
    hidden : tuple of int
        Hidden layer widths.
    epochs, lr0, momentum, weight_decay, batch_size : training
        hyperparameters; lr0/weight_decay default from the precision
        when left as None.
    random_state : int
        Seed for weight init and batch shuffling.
    """

    def __init__(self, bits=None, hidden=(64, 32), epochs=15, lr0=None,
                 momentum=0.9, weight_decay=None, batch_size=64,
                 random_state=0):
        self.bits = bits
        self.hidden = hidden
        self.epochs = epochs
        self.lr0 = lr0
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.random_state = random_state

    def fit(self, X, y):
        X, y = check_X_y(X, y)
        if X.min() < 0:
            raise ValueError("features must be non-negative; layer inputs "
                             "are quantized with unsigned codes")
        self.classes_, y_idx = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise ValueError("need at least two classes")
        cfg = ModelConfig(arch="mlp", input_dim=X.shape[1],
                          hidden=tuple(self.hidden),
                          classes=len(self.classes_), bits=self.bits)
        run = RunConfig(
            epochs=self.epochs,
            lr0=self.lr0 if self.lr0 is not None else default_lr(self.bits),
            momentum=self.momentum,
            weight_decay=(self.weight_decay if self.weight_decay is not None
                          else default_weight_decay(self.bits)),
            batch_size=self.batch_size, seed=self.random_state, bits=self.bits)
        rng = np.random.default_rng(self.random_state)
        model = build_model(cfg, rng)
        data = Dataset(np.asarray(X, dtype=np.float64), y_idx)
        self.model_, self.metrics_, _ = train(model, data, data, run)
        self.n_features_in_ = X.shape[1]
        return self

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise NotFittedError("call fit before predict")

    def decision_function(self, X):
        self._check_fitted()
        X = check_array(X)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected "
                             f"{self.n_features_in_}")
        return self.model_.forward(Tensor(X), training=False).data

    def predict_proba(self, X):
        return np.exp(log_softmax(self.decision_function(X)))

    def predict(self, X):
        scores = self.decision_function(X)
        return self.classes_[scores.argmax(axis=1)]
