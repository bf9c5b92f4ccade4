"""Weight-space proximity matrices and agglomerative hierarchical clustering.

The server-side half of the protocol: pairwise Euclidean distances between
clients' flattened layer weights, bottom-up merging under a chosen linkage,
three dendrogram cut rules, newcomer assignment, and clustering-quality
scoring. Everything here is deterministic; all ties break toward the
smallest index.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, NamedTuple, Sequence

import numpy as np

from .errors import ConfigError, ShapeError, StateError
from .nn import LayeredModel, flatten_layer

LINKAGES = ("single", "complete", "average")


@dataclass
class ProximityMatrix:
    """Symmetric nonnegative matrix of pairwise distances, zero diagonal."""

    entries: np.ndarray

    def __post_init__(self):
        self.entries = np.asarray(self.entries, dtype=np.float64)
        e = self.entries
        if e.ndim != 2 or e.shape[0] != e.shape[1]:
            raise ShapeError(f"proximity matrix must be square, got {e.shape}")
        if e.shape[0] < 1:
            raise ShapeError("proximity matrix must have at least one row")
        if not np.isfinite(e).all():
            raise ShapeError("proximity matrix entries must be finite")
        if not np.array_equal(e, e.T):
            raise ShapeError("proximity matrix must be symmetric")
        if np.any(np.diagonal(e) != 0.0):
            raise ShapeError("proximity matrix diagonal must be zero")
        if e.min() < 0:
            raise ShapeError("proximity matrix entries must be nonnegative")

    @property
    def m(self) -> int:
        return self.entries.shape[0]


class Merge(NamedTuple):
    left: int
    right: int
    distance: float
    new_id: int


@dataclass
class Dendrogram:
    """Full merge history: m-1 merges over leaves 0..m-1; merged nodes get
    ids m, m+1, ... in merge order."""

    num_leaves: int
    merges: list[Merge]

    def __post_init__(self):
        if len(self.merges) != self.num_leaves - 1:
            raise ShapeError(
                f"{self.num_leaves} leaves need {self.num_leaves - 1} merges, "
                f"got {len(self.merges)}"
            )


@dataclass(frozen=True)
class ClusterAssignment:
    """Flat clustering: client id -> cluster id, ids contiguous from 0."""

    client_to_cluster: dict[int, int]
    num_clusters: int

    def __post_init__(self):
        if self.num_clusters < 1:
            raise ConfigError(f"num_clusters must be >= 1, got {self.num_clusters}")
        used = set(self.client_to_cluster.values())
        if used != set(range(self.num_clusters)):
            raise ConfigError(
                f"cluster ids must be contiguous 0..{self.num_clusters - 1}, got {sorted(used)}"
            )

    @classmethod
    def from_groups(cls, groups: Sequence[Sequence[int]]) -> "ClusterAssignment":
        """Relabel arbitrary groups with contiguous ids ordered by smallest member."""
        ordered = sorted((sorted(g) for g in groups), key=lambda g: g[0])
        mapping = {cid: k for k, group in enumerate(ordered) for cid in group}
        return cls(mapping, len(ordered))

    def members(self, cluster_id: int) -> list[int]:
        return sorted(c for c, k in self.client_to_cluster.items() if k == cluster_id)

    def relabel(self, id_map: Mapping[int, int]) -> "ClusterAssignment":
        """Rename clients (e.g. matrix row index -> real client id)."""
        return ClusterAssignment(
            {id_map[c]: k for c, k in self.client_to_cluster.items()}, self.num_clusters
        )


@dataclass(frozen=True)
class CutCriterion:
    """Rule turning a dendrogram into a flat clustering."""

    kind: str  # "fixed_k" | "distance_threshold" | "largest_gap"
    k: int | None = None
    threshold: float | None = None

    def __post_init__(self):
        if self.kind == "fixed_k":
            if self.k is None or self.k < 1:
                raise ConfigError(f"fixed_k needs k >= 1, got {self.k}")
        elif self.kind == "distance_threshold":
            if self.threshold is None or not self.threshold > 0:
                raise ConfigError(f"distance_threshold needs tau > 0, got {self.threshold}")
        elif self.kind != "largest_gap":
            raise ConfigError(f"unknown cut criterion {self.kind!r}")

    @classmethod
    def fixed_k(cls, k: int) -> "CutCriterion":
        return cls("fixed_k", k=k)

    @classmethod
    def distance_threshold(cls, tau: float) -> "CutCriterion":
        return cls("distance_threshold", threshold=tau)

    @classmethod
    def largest_gap(cls) -> "CutCriterion":
        return cls("largest_gap")


def proximity_matrix(vectors: Sequence[np.ndarray]) -> ProximityMatrix:
    """Pairwise Euclidean distances between equal-length vectors."""
    if len(vectors) < 1:
        raise ShapeError("need at least one vector")
    arrays = [np.asarray(v, dtype=np.float64).ravel() for v in vectors]
    lengths = {len(a) for a in arrays}
    if len(lengths) != 1:
        raise ShapeError(f"vectors have ragged lengths: {sorted(lengths)}")
    stacked = np.stack(arrays)
    if not np.isfinite(stacked).all():
        raise ShapeError("vectors must be finite")
    diffs = stacked[:, None, :] - stacked[None, :, :]
    return ProximityMatrix(np.sqrt((diffs * diffs).sum(axis=-1)))


def per_layer_proximity(models: Sequence[LayeredModel], layer_index: int) -> ProximityMatrix:
    """Proximity matrix over one layer's flattened weights across models."""
    if not models:
        raise ShapeError("need at least one model")
    first = models[0]
    for k, model in enumerate(models[1:], start=1):
        if model.num_layers != first.num_layers or any(
            a.weights.shape != b.weights.shape for a, b in zip(model.layers, first.layers)
        ):
            raise ShapeError(f"model {k} architecture differs from model 0")
    return proximity_matrix([flatten_layer(m, layer_index) for m in models])


def _linkage_merges(matrix: ProximityMatrix, linkage: str) -> list[Merge]:
    """Full bottom-up merge sequence via Lance-Williams distance updates.

    Active nodes are kept in ascending id order (leaves 0..m-1, merged nodes
    m, m+1, ...), so scanning pairs in row-major order and keeping strict
    minima picks the smallest (left, right) pair on distance ties.
    """
    m = matrix.m
    dist = matrix.entries.copy()
    ids = list(range(m))
    sizes = [1] * m
    merges: list[Merge] = []
    for step in range(m - 1):
        n = len(ids)
        best = math.inf
        bi = bj = -1
        for i in range(n):
            row = dist[i]
            for j in range(i + 1, n):
                if row[j] < best:
                    best = row[j]
                    bi, bj = i, j
        si, sj = sizes[bi], sizes[bj]
        if linkage == "single":
            new_row = np.minimum(dist[bi], dist[bj])
        elif linkage == "complete":
            new_row = np.maximum(dist[bi], dist[bj])
        else:  # average
            new_row = (si * dist[bi] + sj * dist[bj]) / (si + sj)
        new_id = m + step
        merges.append(Merge(ids[bi], ids[bj], float(best), new_id))

        keep = [k for k in range(n) if k not in (bi, bj)]
        reduced = dist[np.ix_(keep, keep)]
        grown = np.zeros((len(keep) + 1, len(keep) + 1))
        grown[: len(keep), : len(keep)] = reduced
        grown[-1, : len(keep)] = new_row[keep]
        grown[: len(keep), -1] = new_row[keep]
        dist = grown
        ids = [ids[k] for k in keep] + [new_id]
        sizes = [sizes[k] for k in keep] + [si + sj]
    return merges


def _merges_to_apply(merges: list[Merge], num_leaves: int, cut: CutCriterion) -> int:
    distances = [mg.distance for mg in merges]
    if cut.kind == "fixed_k":
        if cut.k > num_leaves:
            raise ConfigError(f"fixed_k={cut.k} exceeds {num_leaves} clients")
        return num_leaves - cut.k
    if cut.kind == "distance_threshold":
        applied = 0
        for d in distances:
            if d > cut.threshold:
                break
            applied += 1
        return applied
    # largest_gap: stop just before the merge that opens the widest jump in
    # the (non-decreasing) merge-distance sequence; no jump means one cluster.
    if not distances:
        return 0
    gaps = [distances[i + 1] - distances[i] for i in range(len(distances) - 1)]
    if not gaps or max(gaps) <= 0:
        return len(distances)
    return gaps.index(max(gaps)) + 1


def _flat_clusters(num_leaves: int, merges: list[Merge], applied: int) -> list[list[int]]:
    members: dict[int, list[int]] = {i: [i] for i in range(num_leaves)}
    for mg in merges[:applied]:
        members[mg.new_id] = members.pop(mg.left) + members.pop(mg.right)
    return list(members.values())


def agglomerative_cluster(
    matrix: ProximityMatrix,
    linkage: str = "average",
    cut: CutCriterion = CutCriterion.largest_gap(),
) -> tuple[ClusterAssignment, Dendrogram]:
    """Bottom-up hierarchical clustering of the proximity matrix.

    Repeatedly merges the closest pair under `linkage` (ties broken by the
    smallest (left id, right id) pair), then flattens the dendrogram with
    `cut`. Returns the assignment plus the full merge history.
    """
    if linkage not in LINKAGES:
        raise ConfigError(f"linkage must be one of {LINKAGES}, got {linkage!r}")
    merges = _linkage_merges(matrix, linkage)
    applied = _merges_to_apply(merges, matrix.m, cut)
    assignment = ClusterAssignment.from_groups(_flat_clusters(matrix.m, merges, applied))
    return assignment, Dendrogram(matrix.m, merges)


def assign_newcomer(vector: np.ndarray, members: Mapping[int, Sequence[np.ndarray]]) -> int:
    """Cluster whose member-vector centroid is nearest; ties -> smallest id."""
    if not members:
        raise StateError("no clusters registered")
    query = np.asarray(vector, dtype=np.float64).ravel()
    best_id = None
    best_dist = math.inf
    for cluster_id in sorted(members):
        stored = members[cluster_id]
        if len(stored) == 0:
            raise StateError(f"cluster {cluster_id} has no stored member vectors")
        stacked = np.stack([np.asarray(v, dtype=np.float64).ravel() for v in stored])
        if stacked.shape[1] != len(query):
            raise ShapeError(
                f"cluster {cluster_id} vectors have length {stacked.shape[1]}, "
                f"query has {len(query)}"
            )
        d = float(np.linalg.norm(stacked.mean(axis=0) - query))
        if d < best_dist:
            best_dist = d
            best_id = cluster_id
    return best_id


def adjusted_rand_index(a: ClusterAssignment, b: ClusterAssignment) -> float:
    """Chance-corrected pair-counting agreement between two clusterings."""
    if set(a.client_to_cluster) != set(b.client_to_cluster):
        raise ConfigError("assignments cover different client sets")
    clients = sorted(a.client_to_cluster)
    n = len(clients)
    if n < 2:
        return 1.0
    table: dict[tuple[int, int], int] = {}
    for c in clients:
        key = (a.client_to_cluster[c], b.client_to_cluster[c])
        table[key] = table.get(key, 0) + 1
    index = sum(math.comb(v, 2) for v in table.values())
    row_sums: dict[int, int] = {}
    col_sums: dict[int, int] = {}
    for (i, j), v in table.items():
        row_sums[i] = row_sums.get(i, 0) + v
        col_sums[j] = col_sums.get(j, 0) + v
    sum_a = sum(math.comb(v, 2) for v in row_sums.values())
    sum_b = sum(math.comb(v, 2) for v in col_sums.values())
    total_pairs = math.comb(n, 2)
    expected = sum_a * sum_b / total_pairs
    max_index = (sum_a + sum_b) / 2.0
    if max_index == expected:
        # Both partitions are all-singletons or both are one cluster: identical.
        return 1.0
    return (index - expected) / (max_index - expected)


def mean_intra_inter(matrix: ProximityMatrix, group_labels: Sequence[int]) -> tuple[float, float]:
    """Mean within-group and between-group distance over off-diagonal pairs.

    `group_labels[i]` is the group of matrix row i. Returns (intra, inter);
    a side with no pairs comes back as nan.
    """
    labels = np.asarray(group_labels)
    if len(labels) != matrix.m:
        raise ShapeError(f"{len(labels)} labels for a {matrix.m}x{matrix.m} matrix")
    intra, inter = [], []
    for i in range(matrix.m):
        for j in range(i + 1, matrix.m):
            (intra if labels[i] == labels[j] else inter).append(matrix.entries[i, j])
    to_mean = lambda vals: float(np.mean(vals)) if vals else math.nan
    return to_mean(intra), to_mean(inter)
