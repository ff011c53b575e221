import itertools

import numpy as np
import pytest

from shopalign.errors import ValidationError
from shopalign.numerics import fit_pca, kmeans


def test_pca_matches_covariance_eigendecomposition():
    X = np.array([[2.0, 0.5, 1.0], [0.0, 1.0, -1.0], [1.0, -2.0, 0.5], [3.0, 1.0, 2.0], [-1.0, 0.0, 0.0]])
    pca = fit_pca(X, 2)
    vals, vecs = np.linalg.eigh(np.cov(X.T))
    order = np.argsort(vals)[::-1]
    assert pca.explained_variance == pytest.approx(vals[order[:2]])
    for j in range(2):
        assert abs(pca.components[j] @ vecs[:, order[j]]) == pytest.approx(1.0)


def test_pca_on_centred_2d_is_a_rotation():
    rng = np.random.default_rng(0)
    X = rng.standard_normal((20, 2)) * [3.0, 1.0]
    X -= X.mean(0)
    Y = fit_pca(X, 2).transform(X)
    assert np.allclose(X @ X.T, Y @ Y.T)


def test_pca_rank_one():
    X = np.outer(np.arange(6.0), [1.0, 2.0, -1.0])
    Y = fit_pca(X, 2).transform(X)
    assert np.allclose(Y[:, 1], 0.0, atol=1e-10)


def test_pca_sign_convention_and_errors():
    X = np.random.default_rng(1).standard_normal((10, 4))
    pca = fit_pca(X, 3)
    assert np.all(pca.components[np.arange(3), np.argmax(np.abs(pca.components), 1)] > 0)
    assert np.allclose(pca.components @ pca.components.T, np.eye(3))
    with pytest.raises(ValidationError):
        fit_pca(X, 5)


def brute_kmeans(X, k):
    """Global optimum by enumerating every labelling."""
    best = None
    for labels in itertools.product(range(k), repeat=len(X)):
        labels = np.array(labels)
        if len(set(labels)) < k:
            continue
        C = np.array([X[labels == j].mean(0) for j in range(k)])
        inertia = ((X - C[labels]) ** 2).sum()
        if best is None or inertia < best[0]:
            best = (inertia, C)
    return best


def test_kmeans_matches_exhaustive_optimum():
    X = np.array([[0, 0], [0, 1], [1, 0], [1, 1], [10, 10], [10, 11], [11, 10], [11, 11]], dtype=float)
    C, labels, inertia = kmeans(X, 2, np.random.default_rng(0))
    inertia_opt, C_opt = brute_kmeans(X, 2)
    assert inertia == pytest.approx(inertia_opt)
    assert sorted(map(tuple, np.round(C, 9))) == sorted(map(tuple, np.round(C_opt, 9)))
    assert len(set(labels[:4])) == 1 and len(set(labels[4:])) == 1


def test_kmeans_no_empty_clusters():
    X = np.vstack([np.zeros((10, 2)), np.ones((1, 2))])
    C, labels, _ = kmeans(X, 3, np.random.default_rng(0))
    assert sorted(set(labels)) == [0, 1, 2]


def test_kmeans_bounds():
    with pytest.raises(ValidationError):
        kmeans(np.zeros((3, 2)), 4, np.random.default_rng(0))
