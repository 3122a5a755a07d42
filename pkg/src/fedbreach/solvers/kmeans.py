"""K-means with a hard cap on cluster size.

The assignment step is the transportation problem of Bradley et al. with unit
demands; it is solved exactly as an LSA between points and ``cap`` replicated
slots per cluster.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..numkernel import Rng
from .lsa import linear_sum_assignment


@dataclass
class ClusterLabels:
    labels: np.ndarray
    sizes: np.ndarray
    centroids: np.ndarray
    objective_trace: list

    @property
    def objective(self) -> float:
        return self.objective_trace[-1]


def _sq_dists(points, centroids):
    return ((points[:, None, :] - centroids[None, :, :]) ** 2).sum(-1)


def kmeans_pp_init(points, n_clusters, rng: Rng):
    n = len(points)
    first = int(rng.integers(0, n))
    centers = [first]
    d2 = ((points - points[first]) ** 2).sum(-1)
    for _ in range(1, n_clusters):
        total = d2.sum()
        if total <= 0:
            # all remaining points coincide with a centre: take the lowest unused index
            unused = np.setdiff1d(np.arange(n), centers)
            pick = int(unused[0]) if unused.size else 0
        else:
            cdf = np.cumsum(d2 / total)
            pick = int(np.searchsorted(cdf, rng.uniform(), side="right"))
            pick = min(pick, n - 1)
            while d2[pick] == 0:  # guard against landing on a zero-mass point at the cdf edge
                pick -= 1
        centers.append(pick)
        d2 = np.minimum(d2, ((points - points[pick]) ** 2).sum(-1))
    return points[centers].copy()


def capped_assignment(points, centroids, cap):
    d2 = _sq_dists(points, centroids)
    cost = np.repeat(d2, cap, axis=1)
    a = linear_sum_assignment(cost)
    labels = np.empty(len(points), dtype=np.intp)
    labels[a.rows] = a.cols // cap
    return labels, float(d2[np.arange(len(points)), labels].sum())


def constrained_kmeans(points, n_clusters: int, cap: int, rng: Rng, max_iter: int = 50,
                       init=None) -> ClusterLabels:
    """Lloyd iterations whose assignment step respects ``cap``.

    ``init`` gives starting centroids; otherwise k-means++ seeding from ``rng``.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim == 1:
        pts = pts[:, None]
    n = len(pts)
    if n_clusters < 1 or cap < 1:
        raise ValueError("n_clusters and cap must be positive")
    if n > n_clusters * cap:
        raise ValueError(f"{n} points cannot fit into {n_clusters} clusters of size <= {cap}")
    if n == 0:
        return ClusterLabels(np.zeros(0, dtype=np.intp), np.zeros(n_clusters, dtype=np.intp),
                             np.zeros((n_clusters, pts.shape[1])), [0.0])
    if n_clusters == 1:
        c = pts.mean(0, keepdims=True)
        return ClusterLabels(np.zeros(n, dtype=np.intp), np.array([n]), c, [float(((pts - c) ** 2).sum())])
    if init is not None:
        centroids = np.array(init, dtype=np.float64).reshape(n_clusters, pts.shape[1])
    else:
        centroids = kmeans_pp_init(pts, min(n_clusters, n), rng)
    if len(centroids) < n_clusters:
        centroids = np.vstack([centroids, np.repeat(centroids[:1], n_clusters - len(centroids), 0)])
    labels, obj = capped_assignment(pts, centroids, cap)
    trace = [obj]
    for _ in range(max_iter):
        new_centroids = centroids.copy()
        for c in range(n_clusters):
            members = pts[labels == c]
            if len(members):
                new_centroids[c] = members.mean(0)
        new_labels, obj = capped_assignment(pts, new_centroids, cap)
        centroids = new_centroids
        converged = np.array_equal(new_labels, labels)
        labels = new_labels
        trace.append(obj)
        if converged:
            break
    sizes = np.bincount(labels, minlength=n_clusters)
    return ClusterLabels(labels, sizes, centroids, trace)
