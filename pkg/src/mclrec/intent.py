"""Latent intents: k-means centroids and per-user intent relevance weights.

Everything here works on plain arrays. The weights and intent-aware
representations act as fixed targets/metadata for the contrastive losses,
so no gradient flows through them.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

DIST_EPS = 1e-8
NORMALIZATIONS = ("none", "max", "l1")


class IntentError(ValueError):
    pass


@dataclass
class IntentModel:
    centroids: np.ndarray
    R: int
    inertia_history: list[float] = field(default_factory=list)

    def __post_init__(self):
        k = len(self.centroids)
        if k < 2:
            raise IntentError(f"need at least 2 centroids, got {k}")
        if not 0 < self.R < k:
            raise IntentError(f"R must satisfy 0 < R < K={k}, got {self.R}")
        if not np.all(np.isfinite(self.centroids)):
            raise IntentError("non-finite centroid")

    @property
    def K(self) -> int:
        return len(self.centroids)


@dataclass
class IntentWeights:
    raw: np.ndarray
    smoothed: np.ndarray
    relevant_sets: np.ndarray  # (N, R) centroid indices, largest raw weight first


def relevant_count(K: int, ratio: float) -> int:
    """R for a given R/K ratio, kept inside (0, K)."""
    return int(min(max(round(ratio * K), 1), K - 1))


def _sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    d = (x * x).sum(1)[:, None] - 2.0 * x @ c.T + (c * c).sum(1)[None, :]
    return np.maximum(d, 0.0)


def _kmeans_pp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(x)
    centers = [int(rng.integers(n))]
    closest = _sq_dists(x, x[centers]).ravel()
    for _ in range(1, k):
        total = closest.sum()
        if total > 0:
            nxt = int(rng.choice(n, p=closest / total))
        else:
            nxt = int(rng.integers(n))
        centers.append(nxt)
        closest = np.minimum(closest, _sq_dists(x, x[[nxt]]).ravel())
    return x[centers].copy()


def lloyd(x: np.ndarray, init: np.ndarray, max_iter: int = 20):
    """Lloyd iterations from ``init``; returns (centroids, labels, inertia per iteration).

    Empty clusters are moved onto the point farthest from its centroid.
    Stops early at an assignment fixpoint.
    """
    centroids = np.array(init, dtype=np.float64)
    k = len(centroids)
    history: list[float] = []
    labels = None
    for _ in range(max(1, max_iter)):
        new_labels = np.argmin(_sq_dists(x, centroids), axis=1)
        diff = x - centroids[new_labels]
        point_cost = (diff * diff).sum(1)
        history.append(float(point_cost.sum()))
        if labels is not None and np.array_equal(new_labels, labels):
            break
        labels = new_labels
        counts = np.bincount(labels, minlength=k)
        sums = np.zeros_like(centroids)
        np.add.at(sums, labels, x)
        filled = counts > 0
        centroids[filled] = sums[filled] / counts[filled, None]
        empty = np.flatnonzero(~filled)
        if empty.size:
            far = np.argsort(-point_cost, kind="stable")
            for j, idx in zip(empty, far):
                centroids[j] = x[idx]
    final = np.argmin(_sq_dists(x, centroids), axis=1)
    return centroids, final, history


def fit_kmeans(reps: np.ndarray, K: int, seed: int, max_iter: int = 20,
               R: int | None = None, ratio: float = 0.5) -> IntentModel:
    """Cluster user representations into K intents (k-means++ seeding + Lloyd)."""
    reps = np.asarray(reps, dtype=np.float64)
    if K > len(reps):
        raise IntentError(f"K={K} exceeds the number of user representations ({len(reps)})")
    if K < 2:
        raise IntentError(f"K must be at least 2, got {K}")
    rng = np.random.default_rng(seed)
    init = _kmeans_pp(reps, K, rng)
    centroids, _, history = lloyd(reps, init, max_iter)
    return IntentModel(centroids, R if R is not None else relevant_count(K, ratio), history)


def assign(reps: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    return np.argmin(_sq_dists(np.asarray(reps), centroids), axis=1)


def inertia(reps: np.ndarray, centroids: np.ndarray) -> float:
    diff = reps - centroids[assign(reps, centroids)]
    return float((diff * diff).sum())


def raw_weights(pooled: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """Reciprocal Euclidean distance to every centroid, distance clamped at ``DIST_EPS``."""
    diff = np.asarray(pooled)[:, None, :] - centroids[None, :, :]
    dist = np.sqrt((diff * diff).sum(-1))
    return 1.0 / np.maximum(dist, DIST_EPS)


def filter_top(raw: np.ndarray, R: int) -> tuple[np.ndarray, np.ndarray]:
    """Zero all but the R largest entries per row (ties -> lower index)."""
    order = np.argsort(-raw, axis=1, kind="stable")[:, :R]
    omega = np.zeros_like(raw)
    rows = np.arange(len(raw))[:, None]
    omega[rows, order] = raw[rows, order]
    return omega, order


def softmax_rows(omega: np.ndarray) -> np.ndarray:
    z = omega - omega.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def smooth_weights(raw: np.ndarray, R: int, normalization: str = "max") -> IntentWeights:
    """Top-R filter, per-row normalisation, then softmax.

    Filtered intents keep the exp(0) baseline mass after the softmax.
    """
    raw = np.asarray(raw, dtype=np.float64)
    if not 0 < R < raw.shape[1]:
        raise IntentError(f"R must satisfy 0 < R < K={raw.shape[1]}, got {R}")
    omega, order = filter_top(raw, R)
    if normalization == "max":
        omega = omega / omega.max(axis=1, keepdims=True)
    elif normalization == "l1":
        omega = omega / np.abs(omega).sum(axis=1, keepdims=True)
    elif normalization != "none":
        raise IntentError(f"unknown normalization {normalization!r}; expected {NORMALIZATIONS}")
    return IntentWeights(raw, softmax_rows(omega), order)


def intent_aware_rep(smoothed: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """Convex combination of all K centroids weighted by the smoothed row."""
    return smoothed @ centroids


def intent_weights(pooled: np.ndarray, model: IntentModel,
                   normalization: str = "max") -> tuple[IntentWeights, np.ndarray]:
    """Weights and intent-aware representations for a batch of pooled reps."""
    w = smooth_weights(raw_weights(pooled, model.centroids), model.R, normalization)
    return w, intent_aware_rep(w.smoothed, model.centroids)
