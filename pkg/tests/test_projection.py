import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from sklearn.decomposition import PCA

from aper.exceptions import ConfigurationError, ShapeError
from aper.projection import FeatureProjector, fit_projector, project


@pytest.fixture
def feats():
    rng = np.random.default_rng(0)
    return rng.normal(size=(40, 12)) @ rng.normal(size=(12, 12)) + rng.normal(size=12)


def test_pca_fit_invariants(feats):
    p = fit_projector(feats, 5, "pca")
    V = p.components_
    np.testing.assert_allclose(V.T @ V, np.eye(5), atol=1e-8)
    np.testing.assert_allclose(p.mean_, feats.mean(axis=0), atol=1e-12)
    assert np.all(np.diff(p.explained_variance_) <= 0)
    assert np.all(np.abs(V).max(axis=0) == V.max(axis=0))  # sign convention


def test_pca_agrees_with_sklearn_up_to_sign(feats):
    p = fit_projector(feats, 4, "pca")
    ref = PCA(n_components=4, svd_solver="full").fit(feats)
    for mine, theirs in zip(p.components_.T, ref.components_):
        assert abs(mine @ theirs) == pytest.approx(1.0, abs=1e-8)
    np.testing.assert_allclose(p.explained_variance_, ref.explained_variance_, rtol=1e-8)


def test_first_direction_follows_stretch_axis():
    rng = np.random.default_rng(1)
    u = np.array([np.cos(0.7), np.sin(0.7)])
    X = rng.normal(size=(500, 1)) * 5 * u + rng.normal(size=(500, 2)) * 0.3
    cov = np.cov(X.T)
    evals, evecs = np.linalg.eigh(cov)  # 2x2 oracle
    top = evecs[:, np.argmax(evals)]
    v = fit_projector(X, 1, "pca").components_[:, 0]
    assert abs(v @ u) > 0.99
    assert abs(v @ top) == pytest.approx(1.0, abs=1e-10)


def test_isometry_on_embedded_support():
    rng = np.random.default_rng(2)
    Z = rng.normal(size=(30, 3))
    X = np.hstack([Z, np.zeros((30, 5))])
    Y = fit_projector(X, 3, "pca").transform(X)
    dX = np.linalg.norm(X[:, None] - X[None], axis=-1)
    dY = np.linalg.norm(Y[:, None] - Y[None], axis=-1)
    np.testing.assert_allclose(dY, dX, atol=1e-8)


def test_full_rank_pca_is_invertible(feats):
    p = fit_projector(feats, 12, "pca")
    np.testing.assert_allclose(p.inverse_transform(p.transform(feats)), feats, atol=1e-8)


def test_project_mean_is_zero(feats):
    p = fit_projector(feats, 6, "pca")
    np.testing.assert_allclose(project(p, p.mean_), np.zeros(6), atol=1e-12)


def test_random_projection_gathers_coordinates(feats):
    p = fit_projector(feats, 5, "random", seed=3)
    idx = p.indices_
    assert len(set(idx.tolist())) == 5 and np.all(np.diff(idx) > 0) and idx.max() < 12
    for slot, i in enumerate(idx):
        e = np.zeros(12)
        e[i] = 1.0
        out = project(p, e)
        assert out[slot] == 1.0 and out.sum() == 1.0
    np.testing.assert_array_equal(fit_projector(feats, 5, "random", seed=3).indices_, idx)
    assert not np.array_equal(fit_projector(feats, 5, "random", seed=4).indices_, idx)


@pytest.mark.parametrize("method", ["pca", "random"])
def test_batch_equals_per_vector_loop(feats, method):
    p = fit_projector(feats, 7, method, seed=0)
    Q = np.random.default_rng(5).normal(size=(20, 12))
    loop = np.array([project(p, q) for q in Q])
    np.testing.assert_allclose(p.transform(Q), loop, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (15, 6), elements=st.floats(-50, 50)), st.sampled_from(["pca", "random"]),
       st.integers(1, 6))
def test_projection_commutes_with_mean(X, method, k):
    p = fit_projector(X, k, method, seed=1)
    np.testing.assert_allclose(p.transform(X.mean(axis=0)), p.transform(X).mean(axis=0), atol=1e-9)


@pytest.mark.parametrize("method, k", [("pca", 0), ("pca", 13), ("random", 0), ("random", 13),
                                       ("pca", None), ("svd", 3)])
def test_k_out_of_range(feats, method, k):
    with pytest.raises(ConfigurationError):
        FeatureProjector(method, k).fit(feats)


def test_pca_rank_limit_uses_sample_count():
    X = np.random.default_rng(0).normal(size=(4, 10))
    with pytest.raises(ConfigurationError):
        fit_projector(X, 5, "pca")
    assert fit_projector(X, 5, "random").transform(X).shape == (4, 5)


def test_length_mismatch(feats):
    p = fit_projector(feats, 3, "pca")
    with pytest.raises(ShapeError):
        project(p, np.ones(11))


def test_estimator_params():
    p = FeatureProjector("random", 4, random_state=9)
    assert p.get_params() == {"method": "random", "n_components": 4, "random_state": 9}
