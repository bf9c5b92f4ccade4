"""Protocol orchestration: broadcast, local training, the one-shot clustering
round, per-cluster aggregation rounds, newcomer onboarding, and the plain
weighted-averaging / proximal baselines.

Everything is deterministic given (configs, seeds, datasets). Client-side
training streams are keyed per (seed, client, round) inside local_train, so
the optional thread pool changes wall-clock time only, never results.
"""

from __future__ import annotations

import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .clustering import (
    ClusterAssignment,
    CutCriterion,
    ProximityMatrix,
    agglomerative_cluster,
    assign_newcomer,
    proximity_matrix,
)
from .data import ClientShard, LabeledDataset
from .errors import AggregationError, ConfigError, DataError, StateError
from .nn import (
    STREAM_SELECT,
    LayeredModel,
    TrainConfig,
    cross_entropy,
    flatten_layer,
    forward,
    local_train,
)
from .reports import ExperimentReport, RoundRecord


@dataclass
class ClientRecord:
    """One simulated client: its data, its cluster once known, and the model
    it produced in the most recent round it participated in."""

    client_id: int
    shard: ClientShard
    cluster: int | None = None
    local_model: LayeredModel | None = None
    test_shard: ClientShard | None = None  # held-out local eval data, optional


@dataclass
class ServerState:
    """Coordinator state. `layer_index` selects which layer's flattened
    weights drive clustering (negative counts from the end, so the default
    -1 is the final layer). `clustering_uploads` counts weight-vector
    uploads to the clustering path; the one-shot property holds when it
    never exceeds the number of clients seen."""

    global_model: LayeredModel
    layer_index: int = -1
    cluster_models: dict[int, LayeredModel] = field(default_factory=dict)
    assignment: ClusterAssignment | None = None
    weight_registry: dict[int, list[np.ndarray]] = field(default_factory=dict)
    round: int = 0  # next round index to run
    clustering_uploads: int = 0

    def __post_init__(self):
        n = self.global_model.num_layers
        if self.layer_index < 0:
            self.layer_index += n
        if not 0 <= self.layer_index < n:
            raise ConfigError(f"layer_index out of range for {n} layers")

    def reset_clustering(self) -> None:
        """Explicitly discard the clustering so a new one may run."""
        self.assignment = None
        self.cluster_models = {}
        self.weight_registry = {}


@dataclass(frozen=True)
class RoundConfig:
    """Schedule knobs for a full run. `total_rounds` counts every
    communication round including the clustering round."""

    total_rounds: int
    train: TrainConfig
    clustering_round_epochs: int = 5
    per_round_epochs: int = 1
    participation_fraction: float = 1.0

    def __post_init__(self):
        if self.total_rounds < 1:
            raise ConfigError(f"total_rounds must be >= 1, got {self.total_rounds}")
        if self.clustering_round_epochs < 0 or self.per_round_epochs < 0:
            raise ConfigError("epoch counts must be >= 0")
        if not 0 < self.participation_fraction <= 1:
            raise ConfigError(
                f"participation_fraction must be in (0, 1], got {self.participation_fraction}"
            )

    def phase_train(self, epochs: int, keep_prox: bool = False) -> TrainConfig:
        """Training config for one phase; proximal term off unless asked for."""
        mu = self.train.prox_mu if keep_prox else 0.0
        return replace(self.train, local_epochs=epochs, prox_mu=mu)


def fedavg_aggregate(updates: list[tuple[LayeredModel, int]]) -> LayeredModel:
    """Sample-count-weighted average of model parameters.

    Evaluated as theta_0 + sum_{i>0} w_i (theta_i - theta_0), which equals
    sum_i w_i theta_i algebraically but keeps exact fixed points: averaging
    identical models returns those parameters bit-for-bit.
    """
    if not updates:
        raise AggregationError("no updates to aggregate")
    first = updates[0][0]
    first_shapes = [layer.weights.shape for layer in first.layers]
    for k, (model, n_i) in enumerate(updates):
        if n_i < 1:
            raise AggregationError(f"update {k}: sample count must be >= 1, got {n_i}")
        if [layer.weights.shape for layer in model.layers] != first_shapes:
            raise AggregationError(f"update {k} architecture differs from update 0")
    total = sum(n_i for _, n_i in updates)
    merged = first.copy()
    for model, n_i in updates[1:]:
        w = n_i / total
        for out_layer, base_layer, upd_layer in zip(merged.layers, first.layers, model.layers):
            out_layer.weights += w * (upd_layer.weights - base_layer.weights)
            out_layer.biases += w * (upd_layer.biases - base_layer.biases)
    return merged


def evaluate(model: LayeredModel, testset: LabeledDataset) -> tuple[float, float]:
    """(accuracy, mean loss) on a test set; argmax ties go to the smallest class."""
    if testset.n == 0:
        raise DataError("cannot evaluate on an empty test set")
    logits = forward(model, testset.features)
    predictions = np.argmax(logits, axis=1)
    accuracy = float(np.mean(predictions == testset.labels))
    return accuracy, cross_entropy(logits, testset.labels)


def broadcast_train(
    clients: list[ClientRecord],
    start_model: LayeredModel,
    cfg: TrainConfig,
    round_index: int,
    anchor: LayeredModel | None = None,
    parallel: bool = False,
) -> list[LayeredModel]:
    """Train every client from `start_model`; results follow the input order.

    The thread pool is safe because local_train is pure given its seeded
    stream; sequential mode is the canonical reference.
    """

    def one(client: ClientRecord) -> LayeredModel:
        return local_train(start_model, client.shard, cfg, anchor=anchor, round_index=round_index)

    if parallel and len(clients) > 1:
        with ThreadPoolExecutor() as pool:
            return list(pool.map(one, clients))
    return [one(c) for c in clients]


def _check_clients(clients: list[ClientRecord]) -> list[ClientRecord]:
    if not clients:
        raise ConfigError("need at least one client")
    ids = [c.client_id for c in clients]
    if len(set(ids)) != len(ids):
        raise ConfigError("client ids must be distinct")
    return sorted(clients, key=lambda c: c.client_id)


def _select_participants(
    members: list[ClientRecord], fraction: float, seed: int, round_index: int, cluster_id: int
) -> list[ClientRecord]:
    """Seeded draw of round participants; full participation draws nothing."""
    if fraction >= 1.0:
        return members
    count = max(1, min(len(members), round(fraction * len(members))))
    rng = np.random.default_rng([STREAM_SELECT, seed, round_index, cluster_id])
    picked = rng.choice(len(members), size=count, replace=False)
    return [members[i] for i in sorted(picked)]


def _pooled_train_loss(model: LayeredModel, members: list[ClientRecord]) -> float:
    feats = np.concatenate([c.shard.features for c in members])
    labels = np.concatenate([c.shard.labels for c in members])
    return cross_entropy(forward(model, feats), labels)


def _local_test_accuracy(model: LayeredModel, members: list[ClientRecord]) -> float:
    """Sample-weighted accuracy over members' local test shards; nan if none."""
    hits = 0.0
    total = 0
    for c in members:
        if c.test_shard is not None and c.test_shard.n_i > 0:
            acc, _ = evaluate(model, c.test_shard.to_dataset())
            hits += acc * c.test_shard.n_i
            total += c.test_shard.n_i
    return hits / total if total else math.nan


def _round_record(
    round_index: int,
    cluster_id: int,
    model: LayeredModel,
    members: list[ClientRecord],
    global_test: LabeledDataset | None,
) -> RoundRecord:
    acc_global = evaluate(model, global_test)[0] if global_test is not None else math.nan
    return RoundRecord(
        round_index=round_index,
        cluster_id=cluster_id,
        train_loss=_pooled_train_loss(model, members),
        test_acc_global=acc_global,
        test_acc_local=_local_test_accuracy(model, members),
        num_clients=len(members),
    )


def one_shot_clustering_round(
    server: ServerState,
    clients: list[ClientRecord],
    cfg: RoundConfig,
    linkage: str = "average",
    cut: CutCriterion = CutCriterion.largest_gap(),
    parallel: bool = False,
) -> tuple[ServerState, ClusterAssignment, ProximityMatrix]:
    """Round 0 of the protocol, all in one communication round.

    Broadcasts the global model, trains every client for
    clustering_round_epochs, collects only each client's flattened
    clustering-layer weights, builds the proximity matrix, clusters it, and
    warm-starts each cluster model as the weighted average of its members'
    full local models. Matrix rows follow ascending client id.
    """
    if server.assignment is not None:
        raise StateError("server already holds a clustering; reset_clustering() first")
    ordered = _check_clients(clients)
    train_cfg = cfg.phase_train(cfg.clustering_round_epochs)
    models = broadcast_train(ordered, server.global_model, train_cfg, 0, parallel=parallel)
    for client, model in zip(ordered, models):
        client.local_model = model
    vectors = [flatten_layer(m, server.layer_index) for m in models]
    server.clustering_uploads += len(vectors)
    matrix = proximity_matrix(vectors)
    row_assignment, _ = agglomerative_cluster(matrix, linkage, cut)
    assignment = row_assignment.relabel({i: c.client_id for i, c in enumerate(ordered)})
    server.assignment = assignment
    server.cluster_models = {}
    server.weight_registry = {}
    for k in range(assignment.num_clusters):
        member_rows = [
            i for i, c in enumerate(ordered) if assignment.client_to_cluster[c.client_id] == k
        ]
        server.cluster_models[k] = fedavg_aggregate(
            [(models[i], ordered[i].shard.n_i) for i in member_rows]
        )
        server.weight_registry[k] = [vectors[i] for i in member_rows]
        for i in member_rows:
            ordered[i].cluster = k
    server.round = 1
    return server, assignment, matrix


def run_cluster_rounds(
    server: ServerState,
    clients: list[ClientRecord],
    cfg: RoundConfig,
    global_test: LabeledDataset | None = None,
    parallel: bool = False,
) -> ExperimentReport:
    """Rounds server.round .. total_rounds-1: per-cluster training and
    aggregation, no cross-cluster mixing ever."""
    if server.assignment is None:
        raise StateError("clustering has not run")
    ordered = _check_clients(clients)
    for c in ordered:
        if c.client_id not in server.assignment.client_to_cluster:
            raise StateError(f"client {c.client_id} is not part of the clustering")
    by_cluster: dict[int, list[ClientRecord]] = {}
    for c in ordered:
        by_cluster.setdefault(server.assignment.client_to_cluster[c.client_id], []).append(c)
    train_cfg = cfg.phase_train(cfg.per_round_epochs)
    report = ExperimentReport(
        method="fedclust", seed=cfg.train.seed, assignment=server.assignment
    )
    while server.round < cfg.total_rounds:
        r = server.round
        for k in sorted(by_cluster):
            members = by_cluster[k]
            participants = _select_participants(
                members, cfg.participation_fraction, cfg.train.seed, r, k
            )
            updated = broadcast_train(
                participants, server.cluster_models[k], train_cfg, r, parallel=parallel
            )
            for client, model in zip(participants, updated):
                client.local_model = model
            server.cluster_models[k] = fedavg_aggregate(
                [(m, c.shard.n_i) for c, m in zip(participants, updated)]
            )
            report.records.append(
                _round_record(r, k, server.cluster_models[k], members, global_test)
            )
        server.round += 1
    report.final_models = dict(server.cluster_models)
    return report


def run_fedclust(
    clients: list[ClientRecord],
    cfg: RoundConfig,
    initial_model: LayeredModel,
    linkage: str = "average",
    cut: CutCriterion = CutCriterion.largest_gap(),
    layer_index: int = -1,
    global_test: LabeledDataset | None = None,
    parallel: bool = False,
) -> tuple[ExperimentReport, ServerState]:
    """Full protocol: clustering round 0, then per-cluster rounds 1..R-1."""
    server = ServerState(global_model=initial_model.copy(), layer_index=layer_index)
    server, assignment, matrix = one_shot_clustering_round(
        server, clients, cfg, linkage, cut, parallel=parallel
    )
    ordered = _check_clients(clients)
    round0 = [
        _round_record(0, k, server.cluster_models[k],
                      [c for c in ordered if c.cluster == k], global_test)
        for k in sorted(server.cluster_models)
    ]
    report = run_cluster_rounds(server, clients, cfg, global_test=global_test, parallel=parallel)
    report.records = round0 + report.records
    report.proximity_matrices = {server.layer_index: matrix}
    if not report.final_models:
        report.final_models = dict(server.cluster_models)
    return report, server


def _run_global_rounds(
    method: str,
    clients: list[ClientRecord],
    cfg: RoundConfig,
    initial_model: LayeredModel,
    use_anchor: bool,
    global_test: LabeledDataset | None,
    parallel: bool,
) -> ExperimentReport:
    ordered = _check_clients(clients)
    train_cfg = cfg.phase_train(cfg.per_round_epochs, keep_prox=use_anchor)
    model = initial_model.copy()
    report = ExperimentReport(method=method, seed=cfg.train.seed)
    for r in range(cfg.total_rounds):
        participants = _select_participants(
            ordered, cfg.participation_fraction, cfg.train.seed, r, 0
        )
        anchor = model if use_anchor else None
        updated = broadcast_train(participants, model, train_cfg, r, anchor=anchor,
                                  parallel=parallel)
        for client, new_model in zip(participants, updated):
            client.local_model = new_model
        model = fedavg_aggregate([(m, c.shard.n_i) for c, m in zip(participants, updated)])
        report.records.append(_round_record(r, 0, model, ordered, global_test))
    report.final_models = {0: model}
    return report


def run_fedavg(
    clients: list[ClientRecord],
    cfg: RoundConfig,
    initial_model: LayeredModel,
    global_test: LabeledDataset | None = None,
    parallel: bool = False,
) -> ExperimentReport:
    """Single global model, weighted averaging every round."""
    return _run_global_rounds("fedavg", clients, cfg, initial_model, False, global_test, parallel)


def run_fedprox(
    clients: list[ClientRecord],
    cfg: RoundConfig,
    initial_model: LayeredModel,
    global_test: LabeledDataset | None = None,
    parallel: bool = False,
) -> ExperimentReport:
    """Like run_fedavg but each client's objective pulls toward the round's
    global model with strength cfg.train.prox_mu."""
    if cfg.train.prox_mu == 0:
        warnings.warn("prox_mu is 0: this run degenerates to plain weighted averaging")
    return _run_global_rounds("fedprox", clients, cfg, initial_model, True, global_test, parallel)


def accommodate_newcomer(
    server: ServerState, newcomer: ClientRecord, cfg: RoundConfig
) -> tuple[int, LayeredModel]:
    """Onboard a client that arrives after clustering, without re-clustering.

    The newcomer trains from the stored pre-clustering global model, uploads
    its clustering-layer vector once, and joins the cluster whose registry
    centroid is nearest. Returns that cluster's id and current model.
    """
    if server.assignment is None:
        raise StateError("cannot onboard a newcomer before clustering")
    if newcomer.cluster is not None:
        raise StateError(f"client {newcomer.client_id} already has a cluster")
    if newcomer.client_id in server.assignment.client_to_cluster:
        raise StateError(f"client {newcomer.client_id} is already a member")
    train_cfg = cfg.phase_train(cfg.clustering_round_epochs)
    model = local_train(server.global_model, newcomer.shard, train_cfg, round_index=0)
    newcomer.local_model = model
    vector = flatten_layer(model, server.layer_index)
    server.clustering_uploads += 1
    cluster_id = assign_newcomer(vector, server.weight_registry)
    server.weight_registry[cluster_id].append(vector)
    newcomer.cluster = cluster_id
    grown = dict(server.assignment.client_to_cluster)
    grown[newcomer.client_id] = cluster_id
    server.assignment = ClusterAssignment(grown, server.assignment.num_clusters)
    return cluster_id, server.cluster_models[cluster_id].copy()
