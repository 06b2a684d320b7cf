import numpy as np
import pytest
import torch

from aper.backbone import ToyCNN, ToyViT, freeze
from aper.stream import ExampleSet, StreamConfig, SyntheticSpec, build_stream, make_synthetic

torch.set_num_threads(1)


@pytest.fixture
def vit():
    torch.manual_seed(0)
    return freeze(ToyViT(image_size=8, patch_size=4, embed_dim=16, depth=2, num_heads=2))


@pytest.fixture
def cnn():
    torch.manual_seed(0)
    return freeze(ToyCNN(image_size=8, channels=(4, 8), strides=(1, 2)))


@pytest.fixture
def images():
    return np.random.default_rng(0).normal(size=(12, 8, 8, 3)).astype(np.float32)


@pytest.fixture
def small_stream():
    """12 classes in 3 tasks of 8x8x3 inputs."""
    spec = SyntheticSpec(n_classes=12, train_per_class=6, test_per_class=4, shape=(8, 8, 3),
                         n_patterns=8, class_seed=3)
    train, test = make_synthetic(spec, sample_seed=4)
    return build_stream(train, test, StreamConfig(12, 0, 4, seed=5))


def gaussian_sets(n_classes, per_class, dim, seed, test_per_class=None):
    rng = np.random.default_rng(seed)
    means = rng.normal(size=(n_classes, dim)) * 2

    def draw(k):
        y = np.repeat(np.arange(n_classes), k)
        return ExampleSet(means[y] + rng.normal(size=(len(y), dim)), y)

    return draw(per_class), draw(test_per_class or per_class)


ACCEPTANCE_LINES = {}


def record_acceptance(number, passed, detail):
    line = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[number])
