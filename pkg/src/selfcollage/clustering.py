"""Unsupervised object categories: k-means over CLS embeddings and
similarity-ranked selection of non-target clusters."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .io import load_arrays, save_arrays


@dataclass(frozen=True)
class SimilarityRange:
    """Inclusive similarity-rank window; rank 1 is the most similar cluster."""

    lo: int
    hi: int

    def __post_init__(self):
        if not 1 <= self.lo < self.hi:
            raise ValueError(f"need 1 <= lo < hi, got ({self.lo}, {self.hi})")


@dataclass
class ClusterModel:
    centroids: np.ndarray  # K x d
    assignments: np.ndarray  # N
    inertia: float
    seed: int = 0
    history: tuple = ()  # inertia after each Lloyd iteration

    @property
    def k(self) -> int:
        return self.centroids.shape[0]

    def members(self, cluster_id: int) -> np.ndarray:
        return np.flatnonzero(self.assignments == cluster_id)

    def save(self, path) -> None:
        """Write ``<path>`` (named arrays) and ``<path>.json`` (sidecar)."""
        path = Path(path)
        save_arrays(path, {"centroids": self.centroids,
                           "assignments": self.assignments.astype(np.float32)})
        meta = {"K": self.k, "d": int(self.centroids.shape[1]), "seed": self.seed,
                "inertia": self.inertia}
        path.with_name(path.name + ".json").write_text(json.dumps(meta, indent=2))

    @classmethod
    def load(cls, path) -> "ClusterModel":
        path = Path(path)
        arrays = load_arrays(path)
        meta = json.loads(path.with_name(path.name + ".json").read_text())
        return cls(arrays["centroids"].astype(np.float64),
                   arrays["assignments"].astype(np.int64), float(meta["inertia"]), int(meta["seed"]))


def _sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    d = (x * x).sum(1)[:, None] - 2.0 * x @ c.T + (c * c).sum(1)[None, :]
    return np.maximum(d, 0.0)


def _kmeans_pp(x, k, rng):
    n = x.shape[0]
    centers = [x[rng.integers(n)]]
    closest = _sq_dists(x, centers[0][None])[:, 0]
    for _ in range(1, k):
        total = closest.sum()
        if total <= 0:
            # all remaining points coincide with a chosen centre
            idx = rng.integers(n)
        else:
            idx = rng.choice(n, p=closest / total)
        centers.append(x[idx])
        closest = np.minimum(closest, _sq_dists(x, x[idx][None])[:, 0])
    return np.array(centers)


def fit_kmeans(embeddings, k: int, max_iters: int = 100, seed: int = 0) -> ClusterModel:
    """Lloyd's algorithm from a k-means++ start.

    Empty clusters are reseeded at the point farthest from its assigned
    centroid, so the returned model always has ``k`` live clusters.
    """
    x = np.asarray(embeddings, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("embeddings must be an N x d array")
    n = x.shape[0]
    if k < 1 or n < k:
        raise ValueError(f"need N >= K >= 1, got N={n}, K={k}")
    rng = np.random.default_rng(seed)
    centroids = _kmeans_pp(x, k, rng)
    labels = None
    history = []
    for _ in range(max_iters):
        d = _sq_dists(x, centroids)
        new = d.argmin(axis=1)
        # repair empty clusters before the update step
        counts = np.bincount(new, minlength=k)
        for empty in np.flatnonzero(counts == 0):
            own = d[np.arange(n), new].copy()
            own[counts[new] < 2] = -np.inf  # never empty another cluster
            far = int(own.argmax())
            counts[new[far]] -= 1
            new[far] = empty
            counts[empty] = 1
            d[far] = np.inf
            d[far, empty] = 0.0
        stable = labels is not None and np.array_equal(new, labels)
        labels = new
        history.append(float(_sq_dists(x, centroids)[np.arange(n), labels].sum()))
        if stable:
            break
        centroids = np.stack([x[labels == j].mean(axis=0) for j in range(k)])
    # final assignment consistent with the returned centroids
    labels = _exact_assign(x, centroids)
    inertia = float(_sq_dists(x, centroids)[np.arange(n), labels].sum())
    return ClusterModel(centroids, labels.astype(np.int64), inertia, seed, tuple(history))


def _exact_assign(x, centroids, chunk=256):
    out = np.empty(x.shape[0], dtype=np.int64)
    for i in range(0, x.shape[0], chunk):
        d = ((x[i:i + chunk, None, :] - centroids[None]) ** 2).sum(axis=2)
        out[i:i + chunk] = d.argmin(axis=1)  # lowest index wins ties
    return out


def assign_raw(centroids: np.ndarray, embedding) -> int:
    e = np.asarray(embedding, dtype=np.float64)
    if e.ndim != 1 or e.shape[0] != centroids.shape[1]:
        raise ValueError(f"embedding has shape {e.shape}, expected ({centroids.shape[1]},)")
    return int(_exact_assign(e[None], centroids)[0])


def assign(model: ClusterModel, embedding) -> int:
    return assign_raw(model.centroids, embedding)


def similarity_ranks(model: ClusterModel, target_id: int) -> np.ndarray:
    """Cluster ids ordered from most to least similar to ``target_id``
    (similarity = negative centroid distance), target excluded."""
    if not 0 <= target_id < model.k:
        raise ValueError(f"invalid target cluster {target_id}")
    d = np.sqrt(((model.centroids - model.centroids[target_id]) ** 2).sum(axis=1))
    order = np.argsort(d, kind="stable")
    return order[order != target_id]


def pick_nontarget_clusters(model: ClusterModel, target_id: int, count: int,
                            similarity: SimilarityRange | None, rng) -> list[int]:
    ranked = similarity_ranks(model, target_id)
    if similarity is None:
        pool = ranked
    else:
        pool = ranked[similarity.lo - 1:similarity.hi]
    if count > len(pool):
        raise ValueError(f"cannot pick {count} clusters from a pool of {len(pool)}")
    picked = rng.choice(pool, size=count, replace=False)
    return [int(c) for c in picked]
