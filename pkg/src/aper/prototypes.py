"""Class prototypes and the cosine prototype classifier.

A prototype is the mean embedding of a class's training examples; it is used
unchanged as that class's classifier weight.  Scores are cosine similarities
between the query embedding and each prototype.
"""
from __future__ import annotations

import math
from typing import Callable, Iterable

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .backbone import Backbone, embed, param_hash
from .exceptions import DegenerateVectorError, MissingClassError, ProtocolError, ShapeError

_CHUNK = 1 << 22  # max elements of the (queries, classes, dim) product held at once


def compute_prototypes(embedder: Callable[[np.ndarray], np.ndarray], X, y,
                       classes: Iterable[int]) -> dict[int, np.ndarray]:
    """Mean embedding per class in ``classes``, keyed by class id.

    Sums are exact (``math.fsum``), so the result does not depend on example order.
    """
    y = np.asarray(y)
    classes = [int(c) for c in classes]
    for c in classes:
        if not np.any(y == c):
            raise MissingClassError(c)
    feats = np.asarray(embedder(X), dtype=np.float64)
    return {c: _exact_mean(feats[y == c]) for c in classes}


def _exact_mean(rows: np.ndarray) -> np.ndarray:
    return np.array([math.fsum(col) for col in rows.T]) / len(rows)


def _unit(v, what):
    norm = np.linalg.norm(v, axis=-1, keepdims=True)
    if np.any(norm == 0):
        raise DegenerateVectorError(f"zero-norm {what}")
    return v / norm


class PrototypeBank:
    """Append-only map class id -> prototype, in registration order."""

    def __init__(self, feature_dim: int):
        self.feature_dim = int(feature_dim)
        self._ids: list[int] = []
        self._protos: list[np.ndarray] = []
        self._units: list[np.ndarray] = []

    def __len__(self):
        return len(self._ids)

    def __contains__(self, class_id):
        return int(class_id) in self._ids

    @property
    def registered_classes(self) -> tuple:
        return tuple(self._ids)

    @property
    def prototypes(self) -> dict[int, np.ndarray]:
        return dict(zip(self._ids, self._protos))

    def matrix(self) -> np.ndarray:
        return np.array(self._protos).reshape(len(self), self.feature_dim)

    def register(self, class_id: int, prototype) -> None:
        class_id = int(class_id)
        if class_id in self._ids:
            raise ProtocolError(f"class {class_id} is already registered")
        p = np.array(prototype, dtype=np.float64)
        if p.shape != (self.feature_dim,):
            raise ShapeError(f"prototype of shape {p.shape}, bank holds {self.feature_dim}-d vectors")
        unit = _unit(p, f"prototype for class {class_id}")
        p.flags.writeable = False
        unit.flags.writeable = False
        self._ids.append(class_id)
        self._protos.append(p)
        self._units.append(unit)

    def register_all(self, prototypes: dict) -> None:
        """Register in ascending class-id order."""
        for c in sorted(prototypes):
            self.register(c, prototypes[c])

    def cosine_logits(self, features) -> np.ndarray:
        """Cosine score of every query row against every prototype, shape (n, K).

        Each score is reduced independently, so a class's score for a given
        query is bit-identical whatever else is registered.
        """
        F = np.asarray(features, dtype=np.float64)
        single = F.ndim == 1
        F = np.ascontiguousarray(np.atleast_2d(F))  # reductions round differently per memory layout
        if F.shape[1] != self.feature_dim:
            raise ShapeError(f"feature length {F.shape[1]} != bank dimension {self.feature_dim}")
        if not self._ids:
            raise ProtocolError("no classes registered")
        Q = _unit(F, "feature")
        P = np.array(self._units)
        step = max(1, _CHUNK // (len(P) * self.feature_dim))
        out = np.concatenate([(Q[i:i + step, None, :] * P[None]).sum(axis=-1)
                              for i in range(0, len(Q), step)])
        return out[0] if single else out

    def predict(self, features) -> np.ndarray:
        """Arg-max class id; ties go to the lowest id."""
        scores = np.atleast_2d(self.cosine_logits(features))
        ids = np.array(self._ids)
        order = np.argsort(ids, kind="stable")
        pred = ids[order][np.argmax(scores[:, order], axis=1)]
        return pred[0] if np.ndim(features) == 1 else pred


def cosine_logits(bank: PrototypeBank, feature) -> np.ndarray:
    return bank.cosine_logits(feature)


def predict(bank: PrototypeBank, feature):
    return bank.predict(feature)


class MergedEmbedder:
    """Concatenated embedding [adapted(x), pretrained(x)] of two frozen backbones."""

    def __init__(self, adapted: Backbone, pretrained: Backbone, batch_size: int = 256):
        if adapted.input_shape != pretrained.input_shape:
            raise ShapeError(f"input shapes differ: {adapted.input_shape} vs {pretrained.input_shape}")
        self.adapted = adapted
        self.pretrained = pretrained
        self.batch_size = batch_size

    @property
    def embed_dim(self) -> int:
        return self.adapted.embed_dim + self.pretrained.embed_dim

    def __call__(self, X) -> np.ndarray:
        return np.hstack([embed(self.adapted, X, self.batch_size),
                          embed(self.pretrained, X, self.batch_size)])

    def param_hash(self) -> str:
        return param_hash(self.adapted) + param_hash(self.pretrained)


def merged_embed(m: MergedEmbedder, X) -> np.ndarray:
    return m(X)


class CosinePrototypeClassifier(ClassifierMixin, BaseEstimator):
    """Prototype classifier over precomputed features.

    ``fit`` starts a new bank; every ``partial_fit`` call appends the classes
    present in its labels.  A class cannot be registered twice.

    Examples
    --------
    >>> import numpy as np
    >>> clf = CosinePrototypeClassifier().fit(np.eye(2), [0, 1])
    >>> clf.predict([[0.9, 0.1]]).tolist()
    [0]
    """

    def fit(self, X, y):
        for attr in ("bank_", "classes_"):
            self.__dict__.pop(attr, None)
        return self.partial_fit(X, y)

    def partial_fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        if not hasattr(self, "bank_"):
            self.bank_ = PrototypeBank(X.shape[1])
            self.n_features_in_ = X.shape[1]
        protos = compute_prototypes(lambda a: a, X, y, np.unique(y))
        self.bank_.register_all(protos)
        self.classes_ = np.array(self.bank_.registered_classes)
        return self

    def decision_function(self, X):
        check_is_fitted(self, "bank_")
        return self.bank_.cosine_logits(check_array(X, dtype=np.float64))

    def predict(self, X):
        check_is_fitted(self, "bank_")
        return self.bank_.predict(check_array(X, dtype=np.float64))
