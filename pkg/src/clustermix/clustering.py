"""Lloyd's k-means with k-means++ seeding over instruction embeddings.

The fitted model is frozen before any adapter training starts; novel
instructions are assigned to the nearest centroid so unseen tasks still
receive a routing condition.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import make_rng


@dataclass
class ClusterModel:
    centroids: np.ndarray  # (k, dim)
    final_objective: float
    iterations_run: int

    @property
    def k(self) -> int:
        return self.centroids.shape[0]

    @property
    def dim(self) -> int:
        return self.centroids.shape[1]


def _squared_distances(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    diff = points[:, None, :] - centroids[None, :, :]
    return np.einsum("nkd,nkd->nk", diff, diff)


def _plusplus_seed(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    centroids = np.empty((k, points.shape[1]), dtype=np.float64)
    centroids[0] = points[rng.integers(n)]
    d2 = ((points - centroids[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            centroids[j] = points[rng.integers(n)]
            continue
        centroids[j] = points[rng.choice(n, p=d2 / total)]
        d2 = np.minimum(d2, ((points - centroids[j]) ** 2).sum(axis=1))
    return centroids


def kmeans_fit(
    vectors: np.ndarray,
    k: int,
    seed: int = 0,
    max_iter: int = 100,
    tol: float = 1e-6,
) -> ClusterModel:
    """Fit k centroids; the per-iteration objective is checked to be
    non-increasing and empty clusters are re-seeded to the point
    currently farthest from its assigned centroid."""
    points = np.asarray(vectors, dtype=np.float64)
    if points.ndim != 2:
        raise ValueError("vectors must form a 2-D array")
    if k < 1:
        raise ValueError("k must be >= 1")
    if points.shape[0] < k:
        raise ValueError(f"need at least {k} points to fit {k} clusters, got {points.shape[0]}")

    rng = make_rng(seed, "kmeans")
    centroids = _plusplus_seed(points, k, rng)
    previous_objective = np.inf
    iterations = 0
    for _ in range(max_iter):
        iterations += 1
        d2 = _squared_distances(points, centroids)
        labels = d2.argmin(axis=1)
        objective = float(d2[np.arange(points.shape[0]), labels].sum())
        if objective > previous_objective + 1e-9 * max(1.0, previous_objective):
            raise RuntimeError("k-means objective increased between iterations")
        previous_objective = objective

        updated = centroids.copy()
        point_d2 = d2[np.arange(points.shape[0]), labels].copy()
        for j in range(k):
            members = labels == j
            if members.any():
                updated[j] = points[members].mean(axis=0)
            else:
                far = int(point_d2.argmax())
                updated[j] = points[far]
                point_d2[far] = -1.0  # one repair per point
        shift = float(np.sqrt(((updated - centroids) ** 2).sum(axis=1)).max())
        centroids = updated
        if shift < tol:
            break

    d2 = _squared_distances(points, centroids)
    final = float(d2.min(axis=1).sum())
    return ClusterModel(centroids=centroids, final_objective=final, iterations_run=iterations)


def assign_cluster(model: ClusterModel, vector: np.ndarray) -> int:
    """Nearest-centroid index; ties break toward the lowest index."""
    v = np.asarray(vector, dtype=np.float64)
    if v.shape != (model.dim,):
        raise ValueError(f"expected a vector of dimension {model.dim}, got shape {v.shape}")
    d2 = ((model.centroids - v) ** 2).sum(axis=1)
    return int(d2.argmin())


def assign_many(model: ClusterModel, vectors: np.ndarray) -> np.ndarray:
    points = np.asarray(vectors, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != model.dim:
        raise ValueError(f"expected vectors of dimension {model.dim}")
    return _squared_distances(points, model.centroids).argmin(axis=1)


def kmeans_objective(model: ClusterModel, vectors: np.ndarray) -> float:
    points = np.asarray(vectors, dtype=np.float64)
    if points.shape[1] != model.dim:
        raise ValueError(f"expected vectors of dimension {model.dim}")
    return float(_squared_distances(points, model.centroids).min(axis=1).sum())
