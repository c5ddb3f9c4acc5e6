"""K-means++ clustering of embedded candidates, Laplacian-kernel scoring and
per-cluster batch selection.

A candidate's score is ``exp(-||v - c||_1 / N_e)`` against its own cluster
center ``c``; it equals 1 at the center and shrinks with L1 distance. The
query variants pick one candidate per cluster:

- ``rnd``: uniformly at random
- ``max``: farthest from the center (lowest score)
- ``min``: closest to the center (highest score)
- ``avg``: largest ``|score - mean cluster score|``

Ties always resolve to the smallest candidate index.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateClusteringError, InvalidInputError

VARIANTS = ("rnd", "max", "min", "avg")


@dataclass
class ClusterAssignment:
    centers: np.ndarray
    membership: np.ndarray
    within_cluster_sse: float
    sse_history: list = field(default_factory=list)
    n_iter: int = 0

    @property
    def k(self):
        return len(self.centers)


def n_distinct(vectors):
    vectors = np.asarray(vectors)
    if len(vectors) == 0:
        return 0
    return len(np.unique(vectors, axis=0))


def _sq_dists(x, centers, x_sq):
    d = x_sq[:, None] - 2.0 * x @ centers.T + np.sum(centers ** 2, axis=1)[None, :]
    return np.maximum(d, 0.0)


def _assign(x, centers, x_sq):
    d = _sq_dists(x, centers, x_sq)
    labels = np.argmin(d, axis=1)
    return labels, d[np.arange(len(x)), labels]


def _seed_centers(x, k, rng, x_sq):
    n = len(x)
    chosen = [int(rng.integers(n))]
    closest = _sq_dists(x, x[chosen], x_sq)[:, 0]
    for _ in range(1, k):
        total = closest.sum()
        if total <= 0:
            break
        idx = int(np.searchsorted(np.cumsum(closest), rng.random() * total, side="right"))
        idx = min(idx, n - 1)
        while closest[idx] <= 0:  # guard against landing on a zero-weight point from rounding
            idx -= 1
        chosen.append(idx)
        closest = np.minimum(closest, _sq_dists(x, x[[idx]], x_sq)[:, 0])
    return x[chosen].copy()


def _repair_empty(x, centers, labels, d2, k):
    """Give each empty cluster the point currently farthest from its center."""
    repaired = False
    counts = np.bincount(labels, minlength=k)
    for j in np.flatnonzero(counts == 0):
        p = int(np.argmax(d2))
        counts[labels[p]] -= 1
        labels[p] = j
        d2[p] = 0.0
        centers[j] = x[p]
        counts[j] = 1
        repaired = True
    return repaired


def kmeans_pp(vectors, k, seed=0, tol=1e-6, max_iter=300, strict=True):
    """K-means++ seeding followed by Lloyd iterations.

    Iterates until the relative change of the within-cluster SSE drops below
    ``tol`` or ``max_iter`` is reached. With ``strict`` (the default) the
    vectors must contain more than ``k`` distinct rows; ``strict=False`` also
    accepts exactly ``k`` distinct rows, giving one cluster per value.
    """
    x = np.asarray(vectors, dtype=np.float64)
    if x.ndim != 2:
        raise InvalidInputError(f"expected a 2-D array of vectors, got shape {x.shape}")
    k = int(k)
    if k < 1:
        raise InvalidInputError("k must be >= 1")
    distinct = n_distinct(x)
    if distinct < k or (strict and distinct == k):
        raise DegenerateClusteringError(distinct, k)

    rng = np.random.default_rng(seed)
    x_sq = np.sum(x ** 2, axis=1)
    centers = _seed_centers(x, k, rng, x_sq)
    if len(centers) < k:  # cannot happen with enough distinct rows, kept as a hard stop
        raise DegenerateClusteringError(distinct, k)

    history = []
    prev = None
    it = 0
    while True:
        labels, d2 = _assign(x, centers, x_sq)
        repaired = _repair_empty(x, centers, labels, d2, k)
        sse = float(d2.sum())
        history.append(sse)
        done = it >= max_iter or (
            not repaired and prev is not None and (prev == 0 or (prev - sse) <= tol * prev)
        )
        if done:
            break
        sums = np.zeros_like(centers)
        np.add.at(sums, labels, x)
        counts = np.bincount(labels, minlength=k)
        centers = sums / counts[:, None]
        prev = sse
        it += 1
    return ClusterAssignment(centers, labels, sse, history, it)


def laplacian_similarity(v, center, n_e):
    """``exp(-||v - center||_1 / n_e)``; rows are scored independently for 2-D input."""
    v = np.asarray(v, dtype=np.float64)
    center = np.asarray(center, dtype=np.float64)
    if v.shape[-1] != center.shape[-1]:
        raise InvalidInputError(f"length mismatch {v.shape[-1]} vs {center.shape[-1]}")
    if n_e < 1:
        raise InvalidInputError("n_e must be >= 1")
    return np.exp(-np.sum(np.abs(v - center), axis=-1) / n_e)


def score_candidates(assignment, vectors, n_e):
    vectors = np.asarray(vectors, dtype=np.float64)
    if len(assignment.membership) != len(vectors):
        raise InvalidInputError("assignment does not cover all vectors")
    return laplacian_similarity(vectors, assignment.centers[assignment.membership], n_e)


def select_batch(variant, assignment, scores, seed=0):
    """One candidate index per cluster, in cluster order."""
    if variant not in VARIANTS:
        raise InvalidInputError(f"unknown variant {variant!r}; choose from {VARIANTS}")
    scores = np.asarray(scores, dtype=np.float64)
    rng = np.random.default_rng(seed)
    picked = []
    for j in range(assignment.k):
        members = np.flatnonzero(assignment.membership == j)
        if len(members) == 0:
            raise AssertionError(f"cluster {j} is empty; clustering must repair empty clusters")
        s = scores[members]
        if variant == "rnd":
            pos = int(rng.integers(len(members)))
        elif variant == "max":
            pos = int(np.argmin(s))
        elif variant == "min":
            pos = int(np.argmax(s))
        else:
            pos = int(np.argmax(np.abs(s - s.mean())))
        picked.append(int(members[pos]))
    return np.array(picked, dtype=np.int64)
