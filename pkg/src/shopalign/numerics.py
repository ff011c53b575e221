"""PCA and k-means on dense numpy arrays."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError


@dataclass(frozen=True)
class PCA:
    mean: np.ndarray
    components: np.ndarray   # (n_components, n_features), rows orthonormal
    explained_variance: np.ndarray

    def transform(self, X: np.ndarray) -> np.ndarray:
        return (np.asarray(X, dtype=np.float64) - self.mean) @ self.components.T


def fit_pca(X: np.ndarray, n_components: int) -> PCA:
    """Principal axes by SVD of the centred data.

    Each component's sign is fixed so its largest-magnitude loading is positive,
    which makes the projection reproducible across LAPACK builds.
    """
    X = np.asarray(X, dtype=np.float64)
    n, f = X.shape
    if n_components > f:
        raise ValidationError(f"cannot keep {n_components} components of {f}-dimensional data")
    if n_components < 1 or n < 2:
        raise ValidationError("PCA needs at least two rows and one component")
    mean = X.mean(axis=0)
    _, s, vt = np.linalg.svd(X - mean, full_matrices=False)
    comps = vt[:n_components].copy()
    if comps.shape[0] < n_components:   # fewer rows than requested components
        pad = np.zeros((n_components - comps.shape[0], f))
        comps = np.vstack([comps, pad])
        s = np.concatenate([s, np.zeros(len(pad))])
    pivot = np.argmax(np.abs(comps), axis=1)
    signs = np.sign(comps[np.arange(len(comps)), pivot])
    comps *= np.where(signs == 0, 1.0, signs)[:, None]
    return PCA(mean, comps, (s[:n_components] ** 2) / max(n - 1, 1))


def _sq_dists(X: np.ndarray, C: np.ndarray) -> np.ndarray:
    d = (X ** 2).sum(1)[:, None] - 2 * X @ C.T + (C ** 2).sum(1)[None, :]
    return np.maximum(d, 0.0)


def _plus_plus(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    centers = [X[rng.integers(len(X))]]
    d = _sq_dists(X, np.array(centers))[:, 0]
    for _ in range(1, k):
        total = d.sum()
        idx = rng.choice(len(X), p=d / total) if total > 0 else rng.integers(len(X))
        centers.append(X[idx])
        d = np.minimum(d, _sq_dists(X, X[idx:idx + 1])[:, 0])
    return np.array(centers)


def kmeans(X: np.ndarray, k: int, rng: np.random.Generator, n_init: int = 4, max_iter: int = 300):
    """Lloyd's algorithm from k-means++ starts; returns ``(centroids, labels, inertia)``.

    An emptied cluster is re-seeded at the point currently farthest from its
    own centroid.
    """
    X = np.asarray(X, dtype=np.float64)
    if not 1 <= k <= len(X):
        raise ValidationError(f"k={k} must lie in [1, {len(X)}]")
    best = None
    for _ in range(n_init):
        C = _plus_plus(X, k, rng)
        labels = None
        for _ in range(max_iter):
            d = _sq_dists(X, C)
            new = d.argmin(1)
            for j in range(k):
                if not np.any(new == j):
                    far = int(np.argmax(d[np.arange(len(X)), new]))
                    new[far] = j
                    d[far, :] = np.inf
                    d[far, j] = 0.0
            if labels is not None and np.array_equal(new, labels):
                break
            labels = new
            C = np.array([X[labels == j].mean(0) for j in range(k)])
        inertia = float(_sq_dists(X, C)[np.arange(len(X)), labels].sum())
        if best is None or inertia < best[2] - 1e-12:
            best = (C, labels, inertia)
    return best
