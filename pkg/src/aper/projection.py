"""Feature compression fitted once on first-stage features.

Two affine maps are supported: PCA (centre, then project on the top-k
principal directions) and random coordinate sampling.  Because both are
affine, projecting a class mean equals averaging projected features.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .exceptions import ConfigurationError, ShapeError

PROJECTION_METHODS = ("pca", "random")


class FeatureProjector(TransformerMixin, BaseEstimator):
    """Project features to ``n_components`` dimensions.

    Parameters
    ----------
    method : {"pca", "random"}
    n_components : int
        Target dimension k.
    random_state : int
        Seed for the coordinate draw of ``method="random"``.

    Attributes
    ----------
    mean_, components_, explained_variance_ : PCA centre, (dim, k) orthonormal
        directions and their eigenvalues in descending order.
    indices_ : sorted coordinates kept by ``method="random"``.
    """

    def __init__(self, method="pca", n_components=None, random_state=0):
        self.method = method
        self.n_components = n_components
        self.random_state = random_state

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        n, dim = X.shape
        k = self.n_components
        if self.method not in PROJECTION_METHODS:
            raise ConfigurationError(f"unknown projection {self.method!r}")
        upper = min(n, dim) if self.method == "pca" else dim
        if k is None or not 1 <= k <= upper:
            raise ConfigurationError(f"n_components={k} outside [1, {upper}] for {self.method}")
        self.n_features_in_ = dim

        if self.method == "pca":
            self.mean_ = X.mean(axis=0)
            centered = X - self.mean_
            cov = centered.T @ centered / max(n - 1, 1)
            evals, evecs = np.linalg.eigh(cov)
            top = np.argsort(evals, kind="stable")[::-1][:k]
            V = evecs[:, top]
            # sign convention: largest-magnitude entry of each direction is positive
            signs = np.sign(V[np.argmax(np.abs(V), axis=0), np.arange(k)])
            self.components_ = np.ascontiguousarray(V * np.where(signs == 0, 1.0, signs))
            self.explained_variance_ = np.clip(evals[top], 0.0, None)
        else:
            rng = np.random.default_rng(self.random_state)
            self.indices_ = np.sort(rng.choice(dim, size=k, replace=False))
        return self

    def transform(self, X):
        check_is_fitted(self, "n_features_in_")
        X = np.asarray(X, dtype=np.float64)
        single = X.ndim == 1
        X = np.atleast_2d(X)
        if X.shape[1] != self.n_features_in_:
            raise ShapeError(f"expected {self.n_features_in_} features, got {X.shape[1]}")
        if self.method == "pca":
            out = (X - self.mean_) @ self.components_
        else:
            out = X[:, self.indices_]
        out = np.ascontiguousarray(out)
        return out[0] if single else out

    def inverse_transform(self, Z):
        check_is_fitted(self, "mean_")
        return np.asarray(Z, dtype=np.float64) @ self.components_.T + self.mean_


def fit_projector(features, k: int, method: str = "pca", seed: int = 0) -> FeatureProjector:
    return FeatureProjector(method=method, n_components=k, random_state=seed).fit(features)


def project(projector: FeatureProjector, x) -> np.ndarray:
    return projector.transform(x)
