"""Shared test utilities: independent reference implementations kept
deliberately naive so they cannot share bugs with the library code."""

from __future__ import annotations

import numpy as np

from fedclust import ClusterAssignment, DenseLayer, LayeredModel, cross_entropy, forward


def make_random_model(rng: np.random.Generator, dims: list[int]) -> LayeredModel:
    layers = [
        DenseLayer(rng.normal(0, 1, size=(dims[i + 1], dims[i])), rng.normal(0, 1, size=dims[i + 1]))
        for i in range(len(dims) - 1)
    ]
    return LayeredModel(layers)


def total_loss(model, X, y, anchor=None, mu: float = 0.0) -> float:
    """Loss re-derived from public pieces only (forward + penalty by hand)."""
    loss = cross_entropy(forward(model, X), y)
    if anchor is not None and mu > 0:
        penalty = 0.0
        for la, lb in zip(model.layers, anchor.layers):
            penalty += ((la.weights - lb.weights) ** 2).sum()
            penalty += ((la.biases - lb.biases) ** 2).sum()
        loss += 0.5 * mu * float(penalty)
    return loss


def numeric_gradients(model, X, y, anchor=None, mu: float = 0.0, h: float = 1e-5):
    """Central finite differences over every parameter, one at a time."""
    grads = []
    for layer in model.layers:
        pair = []
        for arr in (layer.weights, layer.biases):
            g = np.zeros_like(arr)
            it = np.nditer(arr, flags=["multi_index"])
            for _ in it:
                idx = it.multi_index
                original = arr[idx]
                arr[idx] = original + h
                up = total_loss(model, X, y, anchor, mu)
                arr[idx] = original - h
                down = total_loss(model, X, y, anchor, mu)
                arr[idx] = original
                g[idx] = (up - down) / (2 * h)
            pair.append(g)
        grads.append((pair[0], pair[1]))
    return grads


def naive_agglomerative(entries: np.ndarray, linkage: str, k: int) -> ClusterAssignment:
    """O(m^3)-ish reference clustering recomputing every inter-cluster
    distance from the original matrix at every step (no recurrences).

    Node ids mirror the library scheme: leaves 0..m-1, each merge creates
    m+step; the closest pair wins, ties to the smallest (left id, right id).
    """
    m = len(entries)
    clusters: list[tuple[int, frozenset[int]]] = [(i, frozenset([i])) for i in range(m)]

    def linkage_distance(a: frozenset[int], b: frozenset[int]) -> float:
        cross = [entries[i, j] for i in a for j in b]
        if linkage == "single":
            return min(cross)
        if linkage == "complete":
            return max(cross)
        return sum(cross) / len(cross)

    step = 0
    while len(clusters) > k:
        best = None
        for x in range(len(clusters)):
            for y in range(x + 1, len(clusters)):
                d = linkage_distance(clusters[x][1], clusters[y][1])
                key = (d, clusters[x][0], clusters[y][0])
                if best is None or key < best[0]:
                    best = (key, x, y)
        _, x, y = best
        merged = (m + step, clusters[x][1] | clusters[y][1])
        clusters = [c for i, c in enumerate(clusters) if i not in (x, y)] + [merged]
        step += 1
    return ClusterAssignment.from_groups([sorted(members) for _, members in clusters])


def pairwise_distances_loops(vectors) -> np.ndarray:
    """Elementwise-loop Euclidean distances, the dumbest possible way."""
    m = len(vectors)
    out = np.zeros((m, m))
    for i in range(m):
        for j in range(m):
            total = 0.0
            for a, b in zip(np.ravel(vectors[i]), np.ravel(vectors[j])):
                total += (a - b) ** 2
            out[i, j] = total ** 0.5
    return out
