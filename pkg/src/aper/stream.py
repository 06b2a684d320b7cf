"""Exemplar-free class-incremental data protocol.

Classes are shuffled once under a seed and cut into a base task of ``base_m``
classes followed by tasks of ``inc_n`` classes (``base_m == 0`` splits the
classes evenly).  Training data is served one task at a time; test data is
served cumulatively.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .exceptions import ConfigurationError, DataError


@dataclass(frozen=True)
class ExampleSet:
    """A collection of labeled examples: inputs ``X`` (N, ...) and labels ``y`` (N,)."""

    X: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        if len(self.X) != len(self.y):
            raise DataError(f"{len(self.X)} inputs but {len(self.y)} labels")

    def __len__(self):
        return len(self.y)

    def subset(self, mask_or_index) -> "ExampleSet":
        return ExampleSet(self.X[mask_or_index], self.y[mask_or_index])

    @staticmethod
    def concatenate(parts: Sequence["ExampleSet"]) -> "ExampleSet":
        return ExampleSet(np.concatenate([p.X for p in parts]),
                          np.concatenate([p.y for p in parts]))


@dataclass(frozen=True)
class StreamConfig:
    total_classes: int
    base_m: int = 0
    inc_n: int = 10
    seed: int = 1993

    def __post_init__(self):
        if self.total_classes < 1:
            raise ConfigurationError("total_classes must be positive")
        if self.inc_n < 1:
            raise ConfigurationError("inc_n must be positive")
        if self.base_m < 0 or self.base_m > self.total_classes:
            raise ConfigurationError(f"base_m={self.base_m} outside [0, {self.total_classes}]")
        rest = self.total_classes - self.base_m if self.base_m else self.total_classes
        if rest % self.inc_n:
            raise ConfigurationError(
                f"inc_n={self.inc_n} does not divide {rest} "
                f"(total_classes={self.total_classes}, base_m={self.base_m})")

    def task_sizes(self) -> list[int]:
        if self.base_m == 0:
            return [self.inc_n] * (self.total_classes // self.inc_n)
        return [self.base_m] + [self.inc_n] * ((self.total_classes - self.base_m) // self.inc_n)


@dataclass(frozen=True)
class IncrementalStream:
    """Immutable sequence of disjoint-label tasks.  Stages are 1-based."""

    class_order: tuple
    task_label_spaces: tuple
    train_tasks: tuple = field(repr=False)
    test_tasks: tuple = field(repr=False)

    @property
    def B(self) -> int:
        return len(self.task_label_spaces)

    def _check_stage(self, b):
        if not 1 <= b <= self.B:
            raise IndexError(f"stage {b} outside [1, {self.B}]")

    def train_set(self, b: int) -> ExampleSet:
        self._check_stage(b)
        return self.train_tasks[b - 1]

    def test_set(self, b: int) -> ExampleSet:
        self._check_stage(b)
        return self.test_tasks[b - 1]

    def cumulative_test_set(self, b: int) -> ExampleSet:
        self._check_stage(b)
        return ExampleSet.concatenate(self.test_tasks[:b])

    def seen_classes(self, b: int) -> tuple:
        """All class ids of tasks 1..b, in task arrival order."""
        self._check_stage(b)
        return tuple(c for Y in self.task_label_spaces[:b] for c in Y)


def train_set(stream: IncrementalStream, b: int) -> ExampleSet:
    return stream.train_set(b)


def cumulative_test_set(stream: IncrementalStream, b: int) -> ExampleSet:
    return stream.cumulative_test_set(b)


def _check_labels(data: ExampleSet, total: int, name: str):
    y = np.asarray(data.y)
    if not np.issubdtype(y.dtype, np.integer):
        raise DataError(f"{name} labels must be integers, got {y.dtype}")
    if len(y) and (y.min() < 0 or y.max() >= total):
        raise DataError(f"{name} labels must lie in [0, {total}), "
                        f"found range [{y.min()}, {y.max()}]")


def build_stream(train: ExampleSet, test: ExampleSet, config: StreamConfig) -> IncrementalStream:
    _check_labels(train, config.total_classes, "train")
    _check_labels(test, config.total_classes, "test")
    rng = np.random.default_rng(config.seed)
    order = tuple(int(c) for c in rng.permutation(config.total_classes))

    spaces, start = [], 0
    for size in config.task_sizes():
        spaces.append(tuple(order[start:start + size]))
        start += size

    def split(data):
        return tuple(data.subset(np.isin(data.y, Y)) for Y in spaces)

    return IncrementalStream(order, tuple(spaces), split(train), split(test))


# --------------------------------------------------------------------------
# Synthetic data
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class AffineShift:
    """Global affine domain shift applied to every input.

    ``x -> gain * (x + amplify * U^T U x) + offset`` where ``gain`` and
    ``offset`` have one entry per channel (last input axis) and the rows of
    ``U`` are an orthonormal basis of world patterns ``amplify_patterns``
    (a ``(first, count)`` range).  Amplification stretches whatever the inputs
    carry along those directions, noise included.
    """

    gain: tuple = (1.0, 1.0, 1.0)
    offset: tuple = (0.0, 0.0, 0.0)
    amplify: float = 0.0
    amplify_patterns: tuple = (0, 0)

    def apply(self, X: np.ndarray, world_seed: int = 0) -> np.ndarray:
        X = np.asarray(X)
        first, count = self.amplify_patterns
        if self.amplify and count:
            U = world_patterns(world_seed, range(first, first + count), X.shape[1:])
            flat = X.reshape(len(X), -1).astype(np.float64)
            flat = flat + self.amplify * (flat @ U.T) @ U
            X = flat.reshape(X.shape).astype(X.dtype)
        return X * np.asarray(self.gain, dtype=X.dtype) + np.asarray(self.offset, dtype=X.dtype)

    @classmethod
    def random(cls, channels: int, strength: float, seed: int) -> "AffineShift":
        """Log-normal channel gains and normal offsets of scale ``strength``."""
        rng = np.random.default_rng(seed)
        gain = np.exp(rng.normal(0.0, strength, channels))
        offset = rng.normal(0.0, strength, channels)
        return cls(tuple(gain.tolist()), tuple(offset.tolist()))


@dataclass(frozen=True)
class SyntheticSpec:
    """Gaussian class clusters living in a low-rank pattern space.

    A "world" is an indexed bank of fixed smooth unit-norm patterns.  Class
    means are random combinations of patterns ``pattern_offset ..
    pattern_offset + n_patterns - 1``, scaled so that means sit about
    ``separation * sqrt(D)`` apart against isotropic noise of norm about
    ``noise * sqrt(D)``.  Two specs sharing ``world_seed`` and overlapping
    pattern ranges share directions; ``class_seed`` picks the class means.
    ``shift`` is applied last.
    """

    n_classes: int = 20
    train_per_class: int = 30
    test_per_class: int = 20
    shape: tuple = (16, 16, 3)
    n_patterns: int = 16
    pattern_offset: int = 0
    separation: float = 1.0
    noise: float = 0.5
    world_seed: int = 0
    class_seed: int = 1
    shift: Optional[AffineShift] = None


def world_patterns(world_seed: int, indices, shape) -> np.ndarray:
    """Patterns ``indices`` of a world, flattened to (len(indices), prod(shape)).

    Raw pattern i is random normal under (world_seed, i), low-pass filtered
    along the spatial axes for image shapes.  The bank is orthonormalised in
    index order, so pattern i depends only on raw patterns 0..i and distinct
    patterns are orthogonal.
    """
    indices = [int(i) for i in indices]
    if not indices:
        return np.zeros((0, int(np.prod(shape))))
    raws = []
    for i in range(max(indices) + 1):
        raw = np.random.default_rng([int(world_seed), i]).normal(size=tuple(shape))
        if len(shape) == 3:
            for axis in (0, 1):
                raw = (raw + np.roll(raw, 1, axis=axis) + np.roll(raw, -1, axis=axis)) / 3.0
        raws.append(raw.reshape(-1))
    q, r = np.linalg.qr(np.array(raws).T)
    q *= np.sign(np.diag(r))
    return q.T[indices]


def make_synthetic(spec: SyntheticSpec, sample_seed: int = 0) -> tuple[ExampleSet, ExampleSet]:
    """Draw a train and a test split from the clusters described by ``spec``."""
    dim = int(np.prod(spec.shape))
    patterns = world_patterns(spec.world_seed,
                              range(spec.pattern_offset, spec.pattern_offset + spec.n_patterns),
                              spec.shape)

    classes = np.random.default_rng(spec.class_seed)
    coef = classes.normal(size=(spec.n_classes, spec.n_patterns))
    means = coef @ patterns
    means /= np.sqrt(2.0 * np.mean(np.sum(coef ** 2, axis=1)))
    means *= spec.separation * np.sqrt(dim)

    rng = np.random.default_rng(sample_seed)

    def draw(per_class):
        y = np.repeat(np.arange(spec.n_classes), per_class)
        X = means[y] + spec.noise * rng.normal(size=(len(y), dim))
        X = X.reshape((len(y),) + tuple(spec.shape)).astype(np.float32)
        if spec.shift is not None:
            X = spec.shift.apply(X, spec.world_seed)
        return ExampleSet(X, y.astype(np.int64))

    return draw(spec.train_per_class), draw(spec.test_per_class)
