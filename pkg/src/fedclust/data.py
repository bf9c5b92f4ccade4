"""Synthetic datasets and client partitioners (IID, Dirichlet, label-shard).

All functions are pure and fully determined by their seed arguments.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError
from .nn import STREAM_DATA


@dataclass
class LabeledDataset:
    features: np.ndarray  # (n, dim)
    labels: np.ndarray  # (n,) ints in [0, num_classes)
    num_classes: int

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or self.labels.ndim != 1:
            raise DataError(
                f"expected (n, dim) features and (n,) labels, got "
                f"{self.features.shape} / {self.labels.shape}"
            )
        if len(self.features) != len(self.labels):
            raise DataError("features and labels disagree on sample count")
        if len(self.features) < 1:
            raise DataError("dataset must contain at least one sample")
        if not np.isfinite(self.features).all():
            raise DataError("features must be finite")
        if self.num_classes < 1:
            raise DataError(f"num_classes must be >= 1, got {self.num_classes}")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise DataError(
                f"labels must lie in [0, {self.num_classes}), got "
                f"[{self.labels.min()}, {self.labels.max()}]"
            )

    @property
    def n(self) -> int:
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, indices) -> "LabeledDataset":
        """New dataset holding the given rows (num_classes is preserved)."""
        idx = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(self.features[idx], self.labels[idx], self.num_classes)


@dataclass
class ClientShard:
    """A client's slice of a dataset: row indices plus the dataset they index."""

    client_id: int
    dataset: LabeledDataset
    indices: np.ndarray

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64)
        if self.indices.ndim != 1:
            raise DataError(f"indices must be 1-d, got shape {self.indices.shape}")
        if len(np.unique(self.indices)) != len(self.indices):
            raise DataError(f"client {self.client_id}: duplicate indices in shard")
        if len(self.indices) and (
            self.indices.min() < 0 or self.indices.max() >= self.dataset.n
        ):
            raise DataError(f"client {self.client_id}: shard indices out of range")

    @property
    def n_i(self) -> int:
        return len(self.indices)

    @property
    def features(self) -> np.ndarray:
        return self.dataset.features[self.indices]

    @property
    def labels(self) -> np.ndarray:
        return self.dataset.labels[self.indices]

    def to_dataset(self) -> LabeledDataset:
        return self.dataset.subset(self.indices)


@dataclass(frozen=True)
class PartitionGroundTruth:
    """Known client grouping recorded by synthetic label-shard partitions."""

    client_to_group: dict[int, int]


def synth_blobs(
    num_classes: int,
    dim: int,
    samples_per_class: int,
    spread: float,
    seed: int,
) -> LabeledDataset:
    """Balanced Gaussian blobs: one seeded random center per class.

    Centers are standard-normal draws; samples are center + spread * N(0, I).
    spread=0 degenerates to every sample sitting exactly on its center.
    """
    if num_classes < 1 or dim < 1 or samples_per_class < 1:
        raise ConfigError(
            f"counts must be >= 1, got num_classes={num_classes}, dim={dim}, "
            f"samples_per_class={samples_per_class}"
        )
    if spread < 0:
        raise ConfigError(f"spread must be >= 0, got {spread}")
    rng = np.random.default_rng([STREAM_DATA, seed])
    centers = rng.normal(0.0, 1.0, size=(num_classes, dim))
    features = np.empty((num_classes * samples_per_class, dim))
    for c in range(num_classes):
        noise = rng.normal(0.0, 1.0, size=(samples_per_class, dim))
        features[c * samples_per_class : (c + 1) * samples_per_class] = (
            centers[c] + spread * noise
        )
    labels = np.repeat(np.arange(num_classes), samples_per_class)
    return LabeledDataset(features, labels, num_classes)


def _largest_remainder_counts(proportions: np.ndarray, total: int) -> np.ndarray:
    """Apportion `total` items by `proportions` using largest-remainder rounding.

    Ties in the remainders go to the smallest index, so the result is
    reproducible across platforms.
    """
    raw = proportions * total
    counts = np.floor(raw).astype(np.int64)
    short = total - int(counts.sum())
    if short > 0:
        remainders = raw - counts
        order = np.lexsort((np.arange(len(counts)), -remainders))
        counts[order[:short]] += 1
    return counts


def dirichlet_partition(
    dataset: LabeledDataset, num_clients: int, alpha: float, seed: int
) -> list[ClientShard]:
    """Split a dataset across clients with per-class Dirichlet(alpha) proportions.

    For each class a Dirichlet draw over clients decides how that class's
    (shuffled) samples are apportioned; every sample lands in exactly one
    shard. Empty shards are repaired by moving one sample from the largest
    shard, so every client is trainable.
    """
    if num_clients < 1:
        raise ConfigError(f"num_clients must be >= 1, got {num_clients}")
    if not alpha > 0:
        raise ConfigError(f"alpha must be > 0, got {alpha}")
    if dataset.n < num_clients:
        raise DataError(
            f"cannot give {num_clients} clients at least one of {dataset.n} samples"
        )
    rng = np.random.default_rng([STREAM_DATA, seed, num_clients])
    per_client: list[list[np.ndarray]] = [[] for _ in range(num_clients)]
    for c in range(dataset.num_classes):
        class_idx = np.flatnonzero(dataset.labels == c)
        if len(class_idx) == 0:
            continue
        class_idx = rng.permutation(class_idx)
        proportions = rng.dirichlet(np.full(num_clients, alpha))
        counts = _largest_remainder_counts(proportions, len(class_idx))
        start = 0
        for i, count in enumerate(counts):
            per_client[i].append(class_idx[start : start + count])
            start += count
    pools = [
        np.concatenate(chunks) if chunks else np.empty(0, dtype=np.int64)
        for chunks in per_client
    ]
    # Repair: donate one sample at a time from the currently largest shard.
    sizes = np.array([len(p) for p in pools])
    while sizes.min() == 0:
        taker = int(np.argmin(sizes))
        donor = int(np.argmax(sizes))
        pools[taker] = pools[donor][-1:]
        pools[donor] = pools[donor][:-1]
        sizes[taker] += 1
        sizes[donor] -= 1
    return [ClientShard(i, dataset, pools[i]) for i in range(num_clients)]


def label_shard_partition(
    dataset: LabeledDataset,
    groups: list[tuple[list[int], list[int]]],
    seed: int = 0,
) -> tuple[list[ClientShard], PartitionGroundTruth]:
    """Partition by label groups: each group's classes are split evenly
    (after a seeded shuffle) across that group's clients.

    `groups` is a list of (client_ids, class_ids) pairs. Class sets must be
    disjoint and must jointly cover every label present in the dataset, so
    the shards conserve the full index set.
    """
    seen_clients: set[int] = set()
    seen_classes: set[int] = set()
    for client_ids, class_ids in groups:
        if not client_ids:
            raise ConfigError("every group needs at least one client")
        overlap_clients = seen_clients & set(client_ids)
        if overlap_clients or len(set(client_ids)) != len(client_ids):
            raise ConfigError(f"clients assigned to more than one group: {sorted(overlap_clients) or client_ids}")
        overlap_classes = seen_classes & set(class_ids)
        if overlap_classes or len(set(class_ids)) != len(class_ids):
            raise ConfigError(f"class sets overlap across groups: {sorted(overlap_classes) or class_ids}")
        seen_clients.update(client_ids)
        seen_classes.update(class_ids)
    present = set(np.unique(dataset.labels).tolist())
    uncovered = present - seen_classes
    if uncovered:
        raise ConfigError(
            f"classes {sorted(uncovered)} appear in the dataset but in no group"
        )

    rng = np.random.default_rng([STREAM_DATA, seed, len(groups)])
    shards: list[ClientShard] = []
    ground_truth: dict[int, int] = {}
    for g, (client_ids, class_ids) in enumerate(groups):
        mask = np.isin(dataset.labels, np.asarray(class_ids, dtype=np.int64))
        group_idx = rng.permutation(np.flatnonzero(mask))
        k = len(client_ids)
        base, extra = divmod(len(group_idx), k)
        start = 0
        for j, cid in enumerate(client_ids):
            size = base + (1 if j < extra else 0)
            shards.append(ClientShard(cid, dataset, group_idx[start : start + size]))
            ground_truth[cid] = g
            start += size
    return shards, PartitionGroundTruth(ground_truth)


def stratified_test_indices(
    labels: np.ndarray, test_fraction: float, rng: np.random.Generator
) -> np.ndarray:
    """Pick test row positions class by class, round(fraction * class size) each.

    May return an empty selection for small inputs; callers that need both
    sides nonempty must check.
    """
    picks = []
    for c in np.unique(labels):
        class_idx = rng.permutation(np.flatnonzero(labels == c))
        n_test = int(np.floor(test_fraction * len(class_idx) + 0.5))
        picks.append(class_idx[:n_test])
    if not picks:
        return np.empty(0, dtype=np.int64)
    return np.sort(np.concatenate(picks)).astype(np.int64)


def train_test_split(
    dataset: LabeledDataset, test_fraction: float, seed: int
) -> tuple[LabeledDataset, LabeledDataset]:
    """Seeded stratified split preserving class proportions within rounding."""
    if not 0.0 < test_fraction < 1.0:
        raise ConfigError(f"test_fraction must be in (0, 1), got {test_fraction}")
    rng = np.random.default_rng([STREAM_DATA, seed, 1])
    test_idx = stratified_test_indices(dataset.labels, test_fraction, rng)
    mask = np.zeros(dataset.n, dtype=bool)
    mask[test_idx] = True
    train_idx = np.flatnonzero(~mask)
    if len(test_idx) == 0 or len(train_idx) == 0:
        raise ConfigError(
            f"test_fraction {test_fraction} leaves an empty side for n={dataset.n}"
        )
    return dataset.subset(train_idx), dataset.subset(test_idx)


def load_csv_dataset(path: str | Path) -> LabeledDataset:
    """Read a dataset from CSV with header f0..f{dim-1},label, one sample per row."""
    path = Path(path)
    try:
        fh = path.open(newline="")
    except OSError as exc:
        raise DataError(f"{path}: cannot read ({exc})") from None
    with fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        expected = [f"f{i}" for i in range(len(header) - 1)] + ["label"]
        if [h.strip() for h in header] != expected:
            raise DataError(
                f"{path}: header must be f0..f{len(header) - 2},label, got {header}"
            )
        dim = len(header) - 1
        features, labels = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != dim + 1:
                raise DataError(f"{path}:{lineno}: expected {dim + 1} fields, got {len(row)}")
            try:
                features.append([float(v) for v in row[:dim]])
                labels.append(int(row[dim]))
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
    if not features:
        raise DataError(f"{path}: no data rows")
    labels_arr = np.asarray(labels, dtype=np.int64)
    if labels_arr.min() < 0:
        raise DataError(f"{path}: labels must be nonnegative")
    return LabeledDataset(np.asarray(features), labels_arr, int(labels_arr.max()) + 1)
