"""Scikit-learn style wrappers so the engine composes with the ecosystem.

``EnsembleDistiller`` is a transformer: ``fit(X)`` trains the
self-distillation model on unlabeled rows, ``transform(X)`` returns frozen
teacher-encoder representations. ``CosineKnnClassifier`` and
``LinearProbeClassifier`` wrap the two frozen-representation evaluation
protocols as classifiers. All three expose ``get_params``/``set_params``
and clone cleanly.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.exceptions import NotFittedError

from .data import Dataset
from .evaluate import (
    PROBE_L2_GRID,
    ReprBank,
    _logistic_fit,
    extract_representations,
    knn_predict_batch,
)
from .train import TrainConfig, fit as _fit


def check_matrix(x, name: str = "X", dim: int | None = None) -> np.ndarray:
    """Validate a 2-d finite float matrix and return it as float64."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"{name} must be 2-d, got shape {x.shape}")
    if x.shape[0] == 0:
        raise ValueError(f"{name} has no rows")
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{name} contains non-finite values")
    if dim is not None and x.shape[1] != dim:
        raise ValueError(f"{name} has {x.shape[1]} features, expected {dim}")
    return x


def check_labels(y, n_rows: int, name: str = "y") -> np.ndarray:
    y = np.asarray(y)
    if y.shape != (n_rows,):
        raise ValueError(f"{name} must have shape ({n_rows},), got {y.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        yr = np.rint(np.asarray(y, dtype=np.float64))
        if np.any(yr != np.asarray(y, dtype=np.float64)):
            raise ValueError(f"{name} must hold integer class ids")
        y = yr.astype(np.int64)
    if np.any(y < 0):
        raise ValueError(f"{name} must be nonnegative class ids")
    return y.astype(np.int64)


class EnsembleDistiller(BaseEstimator, TransformerMixin):
    """Weighted-ensemble self-distillation as an sklearn transformer.

    Parameters mirror the training configuration; anything not listed rides
    on ``TrainConfig`` defaults. ``y`` is accepted and ignored by ``fit`` so
    the estimator drops into supervised pipelines.
    """

    def __init__(
        self,
        scheme: str = "Ent",
        heads: int = 8,
        codebook_size: int = 64,
        embed_dim: int = 16,
        repr_dim: int = 32,
        epochs: int = 40,
        batch_size: int = 128,
        base_lr: float = 1e-3,
        gamma: float | None = None,
        renorm: str = "sinkhorn",
        lambda_memax: float = 0.0,
        seed: int = 0,
    ):
        self.scheme = scheme
        self.heads = heads
        self.codebook_size = codebook_size
        self.embed_dim = embed_dim
        self.repr_dim = repr_dim
        self.epochs = epochs
        self.batch_size = batch_size
        self.base_lr = base_lr
        self.gamma = gamma
        self.renorm = renorm
        self.lambda_memax = lambda_memax
        self.seed = seed

    def _config(self, input_dim: int) -> TrainConfig:
        return TrainConfig(
            input_dim=input_dim,
            scheme=self.scheme,
            heads=self.heads,
            codebook_size=self.codebook_size,
            embed_dim=self.embed_dim,
            repr_dim=self.repr_dim,
            epochs=self.epochs,
            batch_size=self.batch_size,
            base_lr=self.base_lr,
            gamma=self.gamma,
            renorm=self.renorm,
            lambda_memax=self.lambda_memax,
            seed=self.seed,
        )

    def fit(self, X, y=None):
        X = check_matrix(X)
        result = _fit(self._config(X.shape[1]), Dataset(features=X))
        self.params_ = result.params
        self.teacher_ = result.teacher
        self.final_loss_ = result.final_loss
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X) -> np.ndarray:
        if not hasattr(self, "teacher_"):
            raise NotFittedError("EnsembleDistiller is not fitted")
        X = check_matrix(X, dim=self.n_features_in_)
        return extract_representations(self.teacher_.params, X)


class CosineKnnClassifier(BaseEstimator, ClassifierMixin):
    """Weighted k-NN on cosine similarity with exp(cos/tau) vote weights."""

    def __init__(self, k: int = 10, tau: float = 0.07):
        self.k = k
        self.tau = tau

    def fit(self, X, y):
        X = check_matrix(X)
        y = check_labels(y, X.shape[0])
        self.bank_ = ReprBank(z=X, labels=y)
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X) -> np.ndarray:
        if not hasattr(self, "bank_"):
            raise NotFittedError("CosineKnnClassifier is not fitted")
        X = check_matrix(X, dim=self.n_features_in_)
        return knn_predict_batch(self.bank_, X, self.k, self.tau)


class LinearProbeClassifier(BaseEstimator, ClassifierMixin):
    """Multinomial logistic regression with a fixed L2 strength.

    The deterministic gradient-descent solver from the evaluation kit; for
    the full grid-searched protocol use ``evaluate.linear_probe``.
    """

    def __init__(self, l2: float = PROBE_L2_GRID[0]):
        self.l2 = l2

    def fit(self, X, y):
        X = check_matrix(X)
        y = check_labels(y, X.shape[0])
        self.classes_ = np.arange(int(y.max()) + 1)
        self.w_, self.b_ = _logistic_fit(X, y, len(self.classes_), self.l2)
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X) -> np.ndarray:
        if not hasattr(self, "w_"):
            raise NotFittedError("LinearProbeClassifier is not fitted")
        X = check_matrix(X, dim=self.n_features_in_)
        return np.argmax(X @ self.w_ + self.b_, axis=1)
