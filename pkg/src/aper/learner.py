"""Incremental learners with an estimator interface.

``fit`` consumes the first task, each ``partial_fit`` the next one.  Learners
never keep training data after a call returns.

Modes of :class:`AperClassifier`:

* ``simplecil`` / ``simplecil-ptm``: frozen pre-trained backbone + prototypes.
* ``aper``: adapt a copy on the first ``adapt_stages`` tasks, then classify with
  prototypes of the concatenated [adapted, pre-trained] embedding.
* ``simplecil-adapted``: like ``aper`` but with the adapted embedding alone.

:class:`SequentialFinetuneClassifier` is the sequential finetuning baseline
with a linear head that grows by one column per new class.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted
from torch import nn

from .backbone import Backbone, clone, embed, freeze, param_hash
from .evaluation import MetricsRecord, evaluate_stage
from .exceptions import ConfigurationError, DataError
from .peft import PEFTConfig, adapt
from .projection import FeatureProjector
from .prototypes import CosinePrototypeClassifier, MergedEmbedder
from .stream import ExampleSet, IncrementalStream
from .training import train_cross_entropy

logger = logging.getLogger(__name__)

MODES = ("simplecil", "aper", "finetune-seq", "simplecil-ptm", "simplecil-adapted")
_PROTOTYPE_MODES = ("simplecil", "aper", "simplecil-ptm", "simplecil-adapted")


def stage_seed(seed: int, *keys: int) -> int:
    return int(np.random.SeedSequence([int(seed), *map(int, keys)]).generate_state(1)[0])


@dataclass(frozen=True)
class LearnerConfig:
    mode: str = "aper"
    peft: PEFTConfig = field(default_factory=PEFTConfig)
    adapt_stages: Optional[int] = None  # None: 0 for simplecil modes, 1 for adapting modes
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigurationError(f"unknown learner mode {self.mode!r}; expected one of {MODES}")
        T = self.adapt_stages
        if T is None:
            T = 1 if self.mode in ("aper", "simplecil-adapted") else 0
            object.__setattr__(self, "adapt_stages", T)
        if T < 0:
            raise ConfigurationError("adapt_stages must be non-negative")
        if self.mode in ("simplecil", "simplecil-ptm") and T != 0:
            raise ConfigurationError(f"mode {self.mode} does not adapt; adapt_stages must be 0")
        if self.mode in ("aper", "simplecil-adapted") and T < 1:
            raise ConfigurationError(f"mode {self.mode} needs adapt_stages >= 1")


class AperClassifier(ClassifierMixin, BaseEstimator):
    """Prototype-based incremental classifier over a frozen (possibly adapted) backbone.

    Parameters
    ----------
    backbone : Backbone
        Pre-trained embedding network; never modified.
    mode : str
        One of ``simplecil``, ``simplecil-ptm``, ``aper``, ``simplecil-adapted``.
    peft : PEFTConfig, optional
        Adaptation recipe for the adapting modes.
    adapt_stages : int, optional
        Number of leading tasks the adapted branch is trained on (default 1
        for adapting modes, 0 otherwise).
    projection : {"pca", "random"}, optional
        Compress features with a projector fitted on first-task features.
    n_components : int, optional
        Target dimension of the projection.
    random_state : int
        Seeds adaptation.
    projection_seed : int, optional
        Seeds the random projector; derived from ``random_state`` if omitted.
    batch_size : int
        Inference batch size.
    """

    def __init__(self, backbone=None, mode="aper", peft=None, adapt_stages=None,
                 projection=None, n_components=None, random_state=0, projection_seed=None,
                 batch_size=256):
        self.backbone = backbone
        self.mode = mode
        self.peft = peft
        self.adapt_stages = adapt_stages
        self.projection = projection
        self.n_components = n_components
        self.random_state = random_state
        self.projection_seed = projection_seed
        self.batch_size = batch_size

    # -- state ------------------------------------------------------------

    def _reset(self):
        if self.mode not in _PROTOTYPE_MODES:
            raise ConfigurationError(f"AperClassifier does not run mode {self.mode!r}")
        if not isinstance(self.backbone, Backbone):
            raise ConfigurationError("backbone must be a Backbone instance")
        self.config_ = LearnerConfig(mode=self.mode, peft=self.peft or PEFTConfig(),
                                     adapt_stages=self.adapt_stages, seed=self.random_state)
        self.pretrained_ = freeze(clone(self.backbone))
        self.adapted_ = None
        self.projector_ = None
        self.classifier_ = CosinePrototypeClassifier()
        self.stage_ = 0
        self.frozen_after_ = self.config_.adapt_stages
        self.embedder_hashes_ = []

    def _embedder(self):
        if self.mode in ("simplecil", "simplecil-ptm"):
            return lambda X: embed(self.pretrained_, X, self.batch_size)
        if self.mode == "simplecil-adapted":
            return lambda X: embed(self.adapted_, X, self.batch_size)
        return MergedEmbedder(self.adapted_, self.pretrained_, self.batch_size)

    def _embedder_hash(self):
        h = param_hash(self.pretrained_)
        return h if self.adapted_ is None else param_hash(self.adapted_) + h

    # -- estimator API ----------------------------------------------------

    def fit(self, X, y):
        """Start a new run with ``(X, y)`` as the first task."""
        self._reset()
        return self.partial_fit(X, y)

    def partial_fit(self, X, y):
        """Learn the next task.  Its classes must all be new."""
        if not hasattr(self, "stage_"):
            self._reset()
        X, y = np.asarray(X), np.asarray(y)
        if len(y) == 0:
            raise DataError("empty task")
        self.stage_ += 1
        b = self.stage_
        if b <= self.config_.adapt_stages:
            base = self.adapted_ if self.adapted_ is not None else self.pretrained_
            self.adapted_ = adapt(base, ExampleSet(X, y), self.config_.peft,
                                  seed=stage_seed(self.random_state, b))
            logger.info("stage %d: adapted (%s)", b, self.config_.peft.method)

        feats = self._embedder()(X)
        if self.projection is not None and b == 1:
            seed = self.projection_seed
            if seed is None:
                seed = stage_seed(self.random_state, 0)
            self.projector_ = FeatureProjector(self.projection, self.n_components, random_state=seed)
            self.projector_.fit(feats)
        if self.projector_ is not None:
            feats = self.projector_.transform(feats)
        self.classifier_.partial_fit(feats, y)
        self.classes_ = self.classifier_.classes_
        self.embedder_hashes_.append(self._embedder_hash())
        return self

    def transform(self, X):
        """Features the prototypes live in (after projection, if any)."""
        check_is_fitted(self, "classifier_")
        feats = self._embedder()(np.asarray(X))
        return self.projector_.transform(feats) if self.projector_ is not None else feats

    def decision_function(self, X):
        """Cosine scores, columns ordered as ``classes_``."""
        return self.classifier_.decision_function(self.transform(X))

    def predict(self, X):
        return self.classifier_.predict(self.transform(X))

    @property
    def bank_(self):
        return self.classifier_.bank_


class SequentialFinetuneClassifier(ClassifierMixin, BaseEstimator):
    """Train every parameter with cross-entropy on each task in turn.

    New head columns are appended for each task's classes; previous columns
    stay trainable.  Nothing protects old classes, so they are forgotten.
    """

    def __init__(self, backbone=None, peft=None, random_state=0, batch_size=256):
        self.backbone = backbone
        self.peft = peft
        self.random_state = random_state
        self.batch_size = batch_size

    def fit(self, X, y):
        if not isinstance(self.backbone, Backbone):
            raise ConfigurationError("backbone must be a Backbone instance")
        self.model_ = clone(self.backbone)
        for p in self.model_.parameters():
            p.requires_grad_(True)
        self.model_.frozen = False
        self.head_ = None
        self.classes_ = np.array([], dtype=np.int64)
        self.stage_ = 0
        return self.partial_fit(X, y)

    def partial_fit(self, X, y):
        if not hasattr(self, "model_"):
            return self.fit(X, y)
        X, y = np.asarray(X), np.asarray(y)
        self.stage_ += 1
        seed = stage_seed(self.random_state, self.stage_)
        new = np.unique(y)
        if np.isin(new, self.classes_).any():
            raise DataError("sequential finetuning expects disjoint tasks")
        dtype = next(self.model_.parameters()).dtype
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            head = nn.Linear(self.model_.embed_dim, len(self.classes_) + len(new), bias=False).to(dtype)
        if self.head_ is not None:
            with torch.no_grad():
                head.weight[:len(self.classes_)] = self.head_.weight
        self.head_ = head
        self.classes_ = np.concatenate([self.classes_, new])
        column = {c: i for i, c in enumerate(self.classes_.tolist())}
        targets = np.array([column[c] for c in y.tolist()])

        cfg = self.peft or PEFTConfig(method="full")
        train_cross_entropy(self.model_, self.head_, X, targets,
                            list(self.model_.parameters()) + list(self.head_.parameters()),
                            epochs=cfg.epochs, batch_size=cfg.batch_size, lr=cfg.lr,
                            momentum=cfg.momentum, weight_decay=cfg.weight_decay, seed=seed)
        return self

    def decision_function(self, X):
        check_is_fitted(self, "head_")
        self.model_.eval()
        X = np.asarray(X)
        out = []
        with torch.no_grad():
            dtype = next(self.model_.parameters()).dtype
            for start in range(0, len(X), self.batch_size):
                xb = torch.as_tensor(X[start:start + self.batch_size], dtype=dtype)
                out.append(self.head_(self.model_(xb)).double().numpy())
        return np.concatenate(out)

    def predict(self, X):
        return self.classes_[np.argmax(self.decision_function(X), axis=1)]


def make_learner(backbone: Backbone, config: LearnerConfig, projection: Optional[str] = None,
                 n_components: Optional[int] = None, projection_seed: Optional[int] = None):
    if config.mode == "finetune-seq":
        if projection is not None:
            raise ConfigurationError("projection applies to prototype learners only")
        return SequentialFinetuneClassifier(backbone, peft=config.peft, random_state=config.seed)
    return AperClassifier(backbone, mode=config.mode, peft=config.peft,
                          adapt_stages=config.adapt_stages, projection=projection,
                          n_components=n_components, random_state=config.seed,
                          projection_seed=projection_seed)


def run(stream: IncrementalStream, backbone: Backbone, config: LearnerConfig,
        projection: Optional[str] = None, n_components: Optional[int] = None,
        evaluate: bool = True, callback=None, projection_seed: Optional[int] = None,
        on_record=None):
    """Feed every task of ``stream`` to a fresh learner, evaluating after each stage.

    Returns ``(learner, records)``.  Each task's training set is requested
    exactly once.  ``callback(learner, b)`` runs after each stage, before
    evaluation; ``on_record(record)`` receives each stage's metrics.
    """
    if config.adapt_stages > stream.B:
        raise ConfigurationError(f"adapt_stages={config.adapt_stages} exceeds B={stream.B}")
    learner = make_learner(backbone, config, projection, n_components, projection_seed)
    records: list[MetricsRecord] = []
    for b in range(1, stream.B + 1):
        task = stream.train_set(b)
        if b == 1:
            learner.fit(task.X, task.y)
        else:
            learner.partial_fit(task.X, task.y)
        del task
        if callback is not None:
            callback(learner, b)
        if evaluate:
            records.append(evaluate_stage(learner.predict, stream, b))
            if on_record is not None:
                on_record(records[-1])
            logger.info("stage %d/%d: A_b=%.4f", b, stream.B, float(records[-1].accuracy))
    return learner, records


def run_multistage(stream: IncrementalStream, backbone: Backbone, config: LearnerConfig, **kwargs):
    """Adapt on each of the first T tasks; T=0 is plain SimpleCIL."""
    T = config.adapt_stages
    if not 0 <= T <= stream.B:
        raise ConfigurationError(f"adapt_stages={T} outside [0, {stream.B}]")
    if T == 0:
        config = LearnerConfig(mode="simplecil", peft=config.peft, adapt_stages=0, seed=config.seed)
    return run(stream, backbone, config, **kwargs)
