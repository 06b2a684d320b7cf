import math
from fractions import Fraction

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from sklearn.base import clone as sk_clone

from aper.backbone import ToyViT, embed, freeze
from aper.exceptions import (DegenerateVectorError, MissingClassError, ProtocolError, ShapeError)
from aper.prototypes import (CosinePrototypeClassifier, MergedEmbedder, PrototypeBank,
                             compute_prototypes, cosine_logits, merged_embed, predict)

import oracles

finite = st.floats(-100, 100, allow_nan=False, allow_infinity=False)


def identity(X):
    return np.asarray(X, dtype=np.float64)


def test_prototype_is_exact_mean():
    X = np.array([[0.1, 1e16], [0.2, 1.0], [0.3, -1e16]])
    y = np.array([4, 4, 4])
    proto = compute_prototypes(identity, X, y, [4])[4]
    # correctly rounded column sum, then one division
    expected = [float(sum(map(Fraction, X[:, j]))) / 3 for j in range(2)]
    assert proto.tolist() == expected
    assert proto[1] != 0.0  # naive left-to-right summation loses the 1.0


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (9, 3), elements=finite), st.randoms(use_true_random=False))
def test_prototypes_do_not_depend_on_example_order(X, rnd):
    y = np.array([0, 1, 2] * 3)
    perm = list(range(9))
    rnd.shuffle(perm)
    a = compute_prototypes(identity, X, y, [0, 1, 2])
    b = compute_prototypes(identity, X[perm], y[perm], [0, 1, 2])
    for c in a:
        assert a[c].tobytes() == b[c].tobytes()


def test_missing_class():
    with pytest.raises(MissingClassError) as err:
        compute_prototypes(identity, np.ones((2, 2)), [0, 0], [0, 3])
    assert err.value.class_id == 3


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (4, 5), elements=st.floats(0.5, 10)), arrays(np.float64, (3, 5), elements=finite))
def test_cosine_logits_match_scalar_oracle(protos, queries):
    queries = queries + 0.01  # keep away from the zero vector
    bank = PrototypeBank(5)
    bank.register_all(dict(enumerate(protos)))
    got = bank.cosine_logits(queries)
    for i, q in enumerate(queries):
        for j, p in enumerate(protos):
            want = math.fsum(q * p) / (math.sqrt(math.fsum(q * q)) * math.sqrt(math.fsum(p * p)))
            assert got[i, j] == pytest.approx(want, abs=1e-12)
    assert np.all(np.abs(got) <= 1 + 1e-12)
    np.testing.assert_allclose(bank.cosine_logits(queries * 7.5), got, atol=1e-14)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (6, 4), elements=st.floats(0.1, 5)), arrays(np.float64, (5, 4), elements=st.floats(0.1, 5)))
def test_logits_of_registered_classes_never_change(protos, queries):
    bank = PrototypeBank(4)
    bank.register(0, protos[0])
    first = bank.cosine_logits(queries)[:, 0].copy()
    for c in range(1, 6):
        bank.register(c, protos[c])
        assert bank.cosine_logits(queries)[:, 0].tobytes() == first.tobytes()


def test_ties_go_to_lowest_class_id():
    bank = PrototypeBank(2)
    bank.register(7, [1.0, 0.0])
    bank.register(2, [2.0, 0.0])  # same direction
    bank.register(5, [0.0, 1.0])
    assert predict(bank, np.array([1.0, 0.1])) == 2
    assert bank.predict(np.array([[1.0, 0.0], [0.0, 3.0]])).tolist() == [2, 5]


def test_bank_errors():
    bank = PrototypeBank(3)
    with pytest.raises(ProtocolError):
        bank.cosine_logits(np.ones(3))
    bank.register(1, [1.0, 2.0, 3.0])
    with pytest.raises(ProtocolError):
        bank.register(1, [1.0, 0.0, 0.0])
    with pytest.raises(ShapeError):
        bank.register(2, [1.0, 0.0])
    with pytest.raises(DegenerateVectorError):
        bank.register(3, [0.0, 0.0, 0.0])
    with pytest.raises(DegenerateVectorError):
        cosine_logits(bank, np.zeros(3))
    with pytest.raises(ShapeError):
        bank.cosine_logits(np.ones(4))
    assert bank.registered_classes == (1,) and 1 in bank and len(bank) == 1


def test_stored_prototypes_are_read_only():
    bank = PrototypeBank(2)
    v = np.array([1.0, 2.0])
    bank.register(0, v)
    v[0] = 100.0  # caller's array is copied
    stored = bank.prototypes[0]
    assert stored.tolist() == [1.0, 2.0]
    with pytest.raises(ValueError):
        stored[0] = 5.0


def test_merged_embedding_concatenates(vit, images):
    torch.manual_seed(9)
    other = freeze(ToyViT(image_size=8, patch_size=4, embed_dim=8, depth=1, num_heads=2))
    m = MergedEmbedder(vit, other)
    out = merged_embed(m, images)
    assert out.shape == (12, 24) and m.embed_dim == 24
    np.testing.assert_array_equal(out[:, :16], embed(vit, images))
    np.testing.assert_array_equal(out[:, 16:], embed(other, images))
    with pytest.raises(ShapeError):
        MergedEmbedder(vit, freeze(ToyViT(image_size=4, patch_size=4, embed_dim=8, num_heads=2)))


def test_two_pretrained_encoders_merge_as_a_simplecil_variant(images):
    """Two differently seeded checkpoints form a merged prototype classifier."""
    encoders = []
    for seed in (1, 2):
        torch.manual_seed(seed)
        encoders.append(freeze(ToyViT(image_size=8, patch_size=4, embed_dim=16, num_heads=2)))
    m = MergedEmbedder(*encoders)
    y = np.arange(12) % 4
    clf = CosinePrototypeClassifier().fit(m(images), y)
    pred = clf.predict(m(images))
    np.testing.assert_array_equal(pred, oracles.ncm_cosine_predict(m(images), y, m(images)))


def test_classifier_estimator_api():
    clf = CosinePrototypeClassifier()
    assert clf.get_params() == {}
    X = np.array([[1.0, 0.0], [0.9, 0.1], [0.0, 1.0], [0.1, 0.9]])
    clf.fit(X, [3, 3, 1, 1])
    assert clf.classes_.tolist() == [1, 3]
    clf.partial_fit(np.array([[-1.0, 0.0]]), [8])
    assert clf.classes_.tolist() == [1, 3, 8]
    assert clf.predict([[-2.0, 0.1]]).tolist() == [8]
    assert clf.decision_function(X).shape == (4, 3)
    with pytest.raises(ProtocolError):
        clf.partial_fit(np.array([[0.0, -1.0]]), [3])
    clf.fit(X[:2], [0, 0])
    assert clf.classes_.tolist() == [0]
    assert not hasattr(sk_clone(clf), "bank_")


def test_classifier_matches_offline_ncm():
    rng = np.random.default_rng(0)
    means = rng.normal(size=(6, 10))
    y = np.repeat(np.arange(6), 15)
    X = means[y] + 0.8 * rng.normal(size=(90, 10))
    Q = means[np.arange(60) % 6] + 0.8 * rng.normal(size=(60, 10))
    clf = CosinePrototypeClassifier().fit(X, y)
    np.testing.assert_array_equal(clf.predict(Q), oracles.ncm_cosine_predict(X, y, Q))
