from __future__ import annotations

import warnings

import numpy as np
from sklearn.cluster import KMeans
from sklearn.exceptions import ConvergenceWarning


def normalized_laplacian(affinity: np.ndarray) -> np.ndarray:
    """``I - D^-1/2 A D^-1/2`` after shifting ``A`` to be nonnegative."""
    a = np.asarray(affinity, dtype=np.float64)
    a = a - a.min()
    deg = a.sum(axis=1)
    inv_sqrt = np.where(deg > 0, 1.0 / np.sqrt(np.where(deg > 0, deg, 1.0)), 0.0)
    return np.eye(a.shape[0]) - inv_sqrt[:, None] * a * inv_sqrt[None, :]


def spectral_embedding(affinity: np.ndarray, k: int) -> np.ndarray:
    lap = normalized_laplacian(affinity)
    lap = 0.5 * (lap + lap.T)
    _, vecs = np.linalg.eigh(lap)
    emb = vecs[:, :k]
    norms = np.linalg.norm(emb, axis=1, keepdims=True)
    return emb / np.where(norms > 0, norms, 1.0)


def spectral_cluster(affinity: np.ndarray, k: int, seed: int, n_init: int = 50, max_iter: int = 300) -> np.ndarray:
    """Cluster label per row of a symmetric affinity matrix.

    When there are fewer points than clusters each point gets its own label and
    the remaining labels stay unused. Labels can also go unused when the
    embedding has fewer distinct rows than ``k`` (identical submissions).
    """
    a = np.asarray(affinity, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError("affinity must be a square matrix")
    if not np.allclose(a, a.T, atol=1e-9):
        raise ValueError("affinity must be symmetric")
    if k < 1:
        raise ValueError("k must be positive")
    c = a.shape[0]
    if c <= k:
        return np.arange(c)
    if np.ptp(a) < 1e-12:
        # every pair is equally similar: nothing to separate
        return np.zeros(c, dtype=np.int64)
    emb = spectral_embedding(a, k)
    with warnings.catch_warnings():
        # duplicate embedding rows are expected for tight clusters
        warnings.simplefilter("ignore", ConvergenceWarning)
        km = KMeans(n_clusters=k, init="k-means++", n_init=n_init, max_iter=max_iter, random_state=seed % (2**32))
        return km.fit_predict(emb)

