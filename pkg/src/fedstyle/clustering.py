"""Style-space client clustering and silhouette-driven model selection.

Clients are points in the flattened style space. The number of clusters is
chosen by scanning h in [m, n), running Lloyd's algorithm N times per h,
keeping the run with the smallest total intra-cluster distance, and
returning the partition with the highest mean silhouette score. Singleton
clusters contribute a silhouette of 0.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Hashable, Mapping, Sequence

import numpy as np

from .spectral import Style

__all__ = [
    "StylePoint",
    "ClusterPartition",
    "kmeans",
    "intra_cluster_dist",
    "inter_cluster_dist",
    "silhouette",
    "select_clustering",
    "assign_by_style",
    "cluster_accuracy",
]

ClientId = Hashable

KMEANS_TOL = 1e-9
KMEANS_MAX_ITER = 300


@dataclass(frozen=True)
class StylePoint:
    """One client's mean style, flattened into a clustering-space vector."""

    client_id: ClientId
    vector: np.ndarray

    def __post_init__(self) -> None:
        vec = np.asarray(self.vector, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(vec)):
            raise ValueError(f"style point for client {self.client_id!r} has non-finite values")
        object.__setattr__(self, "vector", vec)


@dataclass(frozen=True)
class ClusterPartition:
    """Client-to-cluster assignment with centroids and the partition's silhouette.

    Every cluster is non-empty and each centroid equals the mean of its
    members' vectors. `points` keeps the clustered vectors so distance
    queries stay answerable after the fact.
    """

    assignments: dict[ClientId, int]
    centroids: list[np.ndarray]
    points: dict[ClientId, np.ndarray]
    silhouette: float = field(default=0.0)

    @property
    def num_clusters(self) -> int:
        return len(self.centroids)

    def members(self, cluster: int) -> list[ClientId]:
        return [k for k, c in self.assignments.items() if c == cluster]

    def validate(self, tol: float = 1e-9) -> None:
        """Assert non-empty clusters and centroid/member-mean consistency."""
        counts = np.bincount(list(self.assignments.values()), minlength=self.num_clusters)
        if np.any(counts == 0):
            raise ValueError("partition contains an empty cluster")
        for c, mu in enumerate(self.centroids):
            member_mean = np.mean([self.points[k] for k in self.members(c)], axis=0)
            if np.max(np.abs(member_mean - mu)) > tol:
                raise ValueError(f"centroid {c} does not equal its members' mean")

    def to_json(self, h_range: tuple[int, int] | None = None, seeds: list[int] | None = None) -> str:
        clusters = [sorted(self.members(c), key=repr) for c in range(self.num_clusters)]
        doc = {
            "clusters": clusters,
            "centroids": [mu.tolist() for mu in self.centroids],
            "silhouette": self.silhouette,
            "h_range": list(h_range) if h_range is not None else None,
            "seeds": seeds,
        }
        return json.dumps(doc, indent=2, sort_keys=True)


def _vectors(points: Sequence[StylePoint]) -> np.ndarray:
    dims = {p.vector.shape[0] for p in points}
    if len(dims) != 1:
        raise ValueError(f"style points must share dimensionality, got {sorted(dims)}")
    return np.stack([p.vector for p in points])


def _farthest_first_init(mat: np.ndarray, h: int, rng: np.random.Generator) -> np.ndarray:
    """Deterministic-given-seed farthest-first centers; first center random."""
    n = mat.shape[0]
    centers = [int(rng.integers(n))]
    dist = np.linalg.norm(mat - mat[centers[0]], axis=1)
    while len(centers) < h:
        nxt = int(np.argmax(dist))  # ties toward smaller index
        centers.append(nxt)
        dist = np.minimum(dist, np.linalg.norm(mat - mat[nxt], axis=1))
    return mat[centers].copy()


def kmeans(points: Sequence[StylePoint], h: int, seed: int) -> ClusterPartition:
    """Lloyd's algorithm with farthest-first init and empty-cluster repair."""
    if not points:
        raise ValueError("kmeans requires at least one point")
    if not 1 <= h <= len(points):
        raise ValueError(f"h={h} outside [1, {len(points)}]")
    mat = _vectors(points)
    rng = np.random.default_rng(seed)
    centroids = _farthest_first_init(mat, h, rng)

    labels = np.zeros(len(points), dtype=int)
    for _ in range(KMEANS_MAX_ITER):
        dists = np.linalg.norm(mat[:, None, :] - centroids[None, :, :], axis=2)
        labels = np.argmin(dists, axis=1)  # argmin ties toward smaller index
        # Reseed empty clusters from the point farthest from its own centroid.
        for c in range(h):
            if not np.any(labels == c):
                farthest = int(np.argmax(dists[np.arange(len(points)), labels]))
                labels[farthest] = c
                centroids[c] = mat[farthest]
                dists[:, c] = np.linalg.norm(mat - centroids[c], axis=1)
        new_centroids = np.stack([mat[labels == c].mean(axis=0) for c in range(h)])
        shift = float(np.max(np.linalg.norm(new_centroids - centroids, axis=1)))
        centroids = new_centroids
        if shift < KMEANS_TOL:
            break

    part = ClusterPartition(
        assignments={p.client_id: int(labels[i]) for i, p in enumerate(points)},
        centroids=[centroids[c].copy() for c in range(h)],
        points={p.client_id: p.vector for p in points},
    )
    part.validate()
    return part


def intra_cluster_dist(part: ClusterPartition, k: ClientId) -> float:
    """Mean L2 distance from client k to the other members of its cluster."""
    if k not in part.assignments:
        raise KeyError(f"unknown client {k!r}")
    cluster = part.assignments[k]
    others = [h for h in part.members(cluster) if h != k]
    if not others:
        return 0.0
    x = part.points[k]
    return float(np.mean([np.linalg.norm(x - part.points[h]) for h in others]))


def inter_cluster_dist(part: ClusterPartition, k: ClientId) -> float:
    """Minimum over other clusters of the mean L2 distance from client k."""
    if k not in part.assignments:
        raise KeyError(f"unknown client {k!r}")
    if part.num_clusters < 2:
        raise ValueError("inter-cluster distance requires at least two clusters")
    x = part.points[k]
    own = part.assignments[k]
    means = [
        np.mean([np.linalg.norm(x - part.points[h]) for h in part.members(c)])
        for c in range(part.num_clusters)
        if c != own
    ]
    return float(min(means))


def silhouette(part: ClusterPartition) -> float:
    """Mean over clients of (b - a) / max(a, b); 0 for singleton clusters."""
    if part.num_clusters < 2:
        raise ValueError("silhouette requires at least two clusters")
    scores = []
    for k in part.assignments:
        if len(part.members(part.assignments[k])) == 1:
            scores.append(0.0)
            continue
        a = intra_cluster_dist(part, k)
        b = inter_cluster_dist(part, k)
        scores.append((b - a) / max(a, b))
    return float(np.mean(scores))


def _total_intra(part: ClusterPartition) -> float:
    return float(sum(intra_cluster_dist(part, k) for k in part.assignments))


def select_clustering(
    points: Sequence[StylePoint], m: int, n: int, N: int, base_seed: int
) -> ClusterPartition:
    """Scan h in [m, n): N seeded k-means runs each, keep the run minimizing
    total intra-cluster distance, then return the h maximizing the silhouette.

    Silhouette ties break toward smaller h; intra-distance ties toward the
    earlier seed. Deterministic given base_seed.
    """
    # h runs over [m, n), so the largest candidate h is n - 1.
    if not (2 <= m < n and n - 1 <= len(points)):
        raise ValueError(f"need 2 <= m < n <= {len(points) + 1}, got m={m}, n={n}")
    if N < 1:
        raise ValueError("N must be >= 1")

    best: ClusterPartition | None = None
    best_score = -np.inf
    seed_seq = np.random.SeedSequence(base_seed)
    run_seeds = [int(s.generate_state(1)[0]) for s in seed_seq.spawn((n - m) * N)]
    for hi, h in enumerate(range(m, n)):
        candidate: ClusterPartition | None = None
        candidate_intra = np.inf
        for r in range(N):
            part = kmeans(points, h, seed=run_seeds[hi * N + r])
            total = _total_intra(part)
            if total < candidate_intra:
                candidate_intra = total
                candidate = part
        assert candidate is not None
        score = silhouette(candidate)
        if score > best_score:  # strict: ties keep the smaller h
            best_score = score
            best = ClusterPartition(
                assignments=candidate.assignments,
                centroids=candidate.centroids,
                points=candidate.points,
                silhouette=score,
            )
    assert best is not None
    return best


def assign_by_style(style: Style | np.ndarray, part: ClusterPartition) -> int:
    """Nearest-centroid cluster for a style vector; ties toward smaller index."""
    vec = style.values if isinstance(style, Style) else np.asarray(style, dtype=np.float64)
    dim = part.centroids[0].shape[0]
    if vec.shape != (dim,):
        raise ValueError(f"style dimension {vec.shape} does not match centroids ({dim},)")
    dists = [float(np.linalg.norm(vec - mu)) for mu in part.centroids]
    return int(np.argmin(dists))


def cluster_accuracy(part: ClusterPartition, truth: Mapping[ClientId, Hashable]) -> float:
    """Majority-vote accuracy of the partition against true domain labels."""
    if set(part.assignments) != set(truth):
        raise ValueError("partition and truth must cover the same clients")
    correct = 0
    for c in range(part.num_clusters):
        members = part.members(c)
        domains = [truth[k] for k in members]
        majority = max(sorted(set(domains), key=repr), key=domains.count)
        correct += domains.count(majority)
    return correct / len(part.assignments)
