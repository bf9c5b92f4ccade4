import math
import warnings

import numpy as np
import pytest

import fedclust.federation as federation
from fedclust import (
    AggregationError,
    ClientRecord,
    ClientShard,
    ConfigError,
    CutCriterion,
    DataError,
    DenseLayer,
    LabeledDataset,
    LayeredModel,
    RoundConfig,
    ServerState,
    StateError,
    TrainConfig,
    accommodate_newcomer,
    adjusted_rand_index,
    dirichlet_partition,
    evaluate,
    fedavg_aggregate,
    forward,
    init_model,
    label_shard_partition,
    local_train,
    one_shot_clustering_round,
    run_cluster_rounds,
    run_fedavg,
    run_fedclust,
    run_fedprox,
    synth_blobs,
)
from fedclust.clustering import ClusterAssignment
from helpers import make_random_model


def models_equal(a: LayeredModel, b: LayeredModel) -> bool:
    return all(
        np.array_equal(la.weights, lb.weights) and np.array_equal(la.biases, lb.biases)
        for la, lb in zip(a.layers, b.layers)
    )


def scalar_model(value: float) -> LayeredModel:
    return LayeredModel([DenseLayer(np.array([[value]]), np.array([value]))])


def two_group_clients(seed: int, num_classes=6, dim=8, per_class=40, spread=1.5):
    ds = synth_blobs(num_classes, dim, per_class, spread, seed)
    half = num_classes // 2
    groups = [
        (list(range(3)), list(range(half))),
        (list(range(3, 6)), list(range(half, num_classes))),
    ]
    shards, truth = label_shard_partition(ds, groups, seed)
    clients = [ClientRecord(client_id=s.client_id, shard=s) for s in shards]
    return clients, truth, ds


def quick_cfg(seed: int, rounds=3, cluster_epochs=2, per_round=1, frac=1.0) -> RoundConfig:
    train = TrainConfig(local_epochs=1, batch_size=16, learning_rate=0.1, seed=seed)
    return RoundConfig(
        total_rounds=rounds,
        train=train,
        clustering_round_epochs=cluster_epochs,
        per_round_epochs=per_round,
        participation_fraction=frac,
    )


class TestFedavgAggregate:
    def test_single_update_unchanged_bitwise(self):
        rng = np.random.default_rng(0)
        model = make_random_model(rng, [3, 4, 2])
        out = fedavg_aggregate([(model, 17)])
        assert models_equal(out, model)
        assert out is not model

    def test_identical_models_exact_fixed_point(self):
        model = scalar_model(0.7)
        out = fedavg_aggregate([(model, 1), (model.copy(), 2)])
        assert out.layers[0].weights[0, 0] == 0.7  # exact, not approx

    def test_hand_example(self):
        out = fedavg_aggregate([(scalar_model(1.0), 1), (scalar_model(4.0), 3)])
        assert out.layers[0].weights[0, 0] == 3.25
        assert out.layers[0].biases[0] == 3.25

    def test_matches_direct_weighted_sum(self):
        rng = np.random.default_rng(1)
        for _ in range(30):
            count = int(rng.integers(1, 6))
            models = [make_random_model(rng, [2, 3, 2]) for _ in range(count)]
            ns = [int(rng.integers(1, 50)) for _ in range(count)]
            total = sum(ns)
            out = fedavg_aggregate(list(zip(models, ns)))
            for li in range(2):
                ref_w = sum((n / total) * m.layers[li].weights for m, n in zip(models, ns))
                ref_b = sum((n / total) * m.layers[li].biases for m, n in zip(models, ns))
                np.testing.assert_allclose(out.layers[li].weights, ref_w, rtol=1e-12, atol=1e-12)
                np.testing.assert_allclose(out.layers[li].biases, ref_b, rtol=1e-12, atol=1e-12)

    def test_convex_bounds_elementwise(self):
        rng = np.random.default_rng(2)
        models = [make_random_model(rng, [2, 2]) for _ in range(4)]
        ns = [3, 1, 7, 2]
        out = fedavg_aggregate(list(zip(models, ns)))
        stack = np.stack([m.layers[0].weights for m in models])
        assert np.all(out.layers[0].weights >= stack.min(axis=0) - 1e-12)
        assert np.all(out.layers[0].weights <= stack.max(axis=0) + 1e-12)

    def test_errors(self):
        rng = np.random.default_rng(3)
        model = make_random_model(rng, [2, 2])
        with pytest.raises(AggregationError):
            fedavg_aggregate([])
        with pytest.raises(AggregationError):
            fedavg_aggregate([(model, 0)])
        with pytest.raises(AggregationError):
            fedavg_aggregate([(model, 1), (make_random_model(rng, [2, 3]), 1)])


class TestEvaluate:
    def test_zero_model_balanced_classes(self):
        ds = synth_blobs(num_classes=4, dim=3, samples_per_class=10, spread=1.0, seed=0)
        zero = LayeredModel([DenseLayer(np.zeros((4, 3)), np.zeros(4))])
        acc, loss = evaluate(zero, ds)
        assert acc == 0.25  # ties always predict class 0; labels balanced
        assert loss == pytest.approx(np.log(4.0), rel=1e-12)

    def test_single_sample_memorized(self):
        ds = LabeledDataset(np.array([[1.0, 0.0]]), np.array([1]), 2)
        model = LayeredModel([DenseLayer(np.array([[0.0, 0.0], [5.0, 0.0]]), np.zeros(2))])
        acc, _ = evaluate(model, ds)
        assert acc == 1.0

    def test_matches_per_sample_loop(self):
        rng = np.random.default_rng(4)
        for _ in range(10):
            model = make_random_model(rng, [3, 5, 4])
            X = rng.normal(size=(20, 3))
            y = rng.integers(0, 4, size=20)
            ds = LabeledDataset(X, y, 4)
            acc, _ = evaluate(model, ds)
            hits = 0
            for i in range(20):
                logits = forward(model, X[i : i + 1])[0]
                best = min(range(4), key=lambda c: (-logits[c], c))
                hits += best == y[i]
            assert acc == hits / 20


class TestOneShotClusteringRound:
    def test_two_groups_recovered_and_warm_started(self):
        clients, truth, _ = two_group_clients(seed=0)
        cfg = quick_cfg(seed=0)
        server = ServerState(global_model=init_model([8, 16, 6], seed=0))
        server, assignment, matrix = one_shot_clustering_round(server, clients, cfg)
        gt = ClusterAssignment.from_groups(
            [[c for c, g in truth.client_to_group.items() if g == k] for k in (0, 1)]
        )
        assert adjusted_rand_index(assignment, gt) == 1.0
        assert matrix.m == 6
        assert server.clustering_uploads == 6
        assert server.round == 1
        # warm start: each cluster model is the weighted average of its
        # members' uploaded full models
        for k in range(assignment.num_clusters):
            members = [c for c in clients if c.cluster == k]
            expected = fedavg_aggregate([(c.local_model, c.shard.n_i) for c in members])
            assert models_equal(server.cluster_models[k], expected)
            assert len(server.weight_registry[k]) == len(members)

    def test_iid_clients_do_not_all_separate(self):
        # with no structure the largest-gap cut should find fewer clusters
        # than clients
        for seed in range(10):
            ds = synth_blobs(num_classes=4, dim=6, samples_per_class=50, spread=1.0, seed=seed)
            shards = dirichlet_partition(ds, 10, 1000.0, seed=seed)
            clients = [ClientRecord(client_id=s.client_id, shard=s) for s in shards]
            cfg = quick_cfg(seed=seed)
            server = ServerState(global_model=init_model([6, 12, 4], seed=seed))
            _, assignment, _ = one_shot_clustering_round(server, clients, cfg)
            assert assignment.num_clusters < 10

    def test_single_client_single_cluster(self):
        ds = synth_blobs(num_classes=3, dim=4, samples_per_class=10, spread=1.0, seed=1)
        clients = [ClientRecord(client_id=0, shard=ClientShard(0, ds, np.arange(ds.n)))]
        server = ServerState(global_model=init_model([4, 3], seed=1))
        _, assignment, matrix = one_shot_clustering_round(server, clients, quick_cfg(1))
        assert assignment.client_to_cluster == {0: 0}
        assert matrix.m == 1

    def test_reclustering_rejected(self):
        clients, _, _ = two_group_clients(seed=2)
        cfg = quick_cfg(seed=2)
        server = ServerState(global_model=init_model([8, 16, 6], seed=2))
        one_shot_clustering_round(server, clients, cfg)
        with pytest.raises(StateError):
            one_shot_clustering_round(server, clients, cfg)
        server.reset_clustering()
        one_shot_clustering_round(server, clients, cfg)  # explicit reset allows it

    def test_duplicate_client_ids_rejected(self):
        ds = synth_blobs(num_classes=2, dim=2, samples_per_class=10, spread=1.0, seed=0)
        shard = ClientShard(0, ds, np.arange(ds.n))
        clients = [ClientRecord(0, shard), ClientRecord(0, shard)]
        server = ServerState(global_model=init_model([2, 2], seed=0))
        with pytest.raises(ConfigError):
            one_shot_clustering_round(server, clients, quick_cfg(0))


class TestRunClusterRounds:
    def test_zero_epochs_freeze_models_and_metrics(self):
        clients, _, _ = two_group_clients(seed=3)
        cfg = quick_cfg(seed=3, rounds=4, per_round=0)
        server = ServerState(global_model=init_model([8, 16, 6], seed=3))
        one_shot_clustering_round(server, clients, cfg)
        frozen = {k: m.copy() for k, m in server.cluster_models.items()}
        report = run_cluster_rounds(server, clients, cfg)
        for k, m in server.cluster_models.items():
            assert models_equal(m, frozen[k])
        by_cluster = {}
        for rec in report.records:
            by_cluster.setdefault(rec.cluster_id, []).append(rec.train_loss)
        for losses in by_cluster.values():
            assert len(set(losses)) == 1

    def test_requires_clustering(self):
        clients, _, _ = two_group_clients(seed=4)
        server = ServerState(global_model=init_model([8, 16, 6], seed=4))
        with pytest.raises(StateError):
            run_cluster_rounds(server, clients, quick_cfg(4))

    def test_cluster_closure(self, monkeypatch):
        # every local training call must start from the model of the
        # client's own cluster, never another cluster's
        clients, _, _ = two_group_clients(seed=5)
        cfg = quick_cfg(seed=5, rounds=3)
        server = ServerState(global_model=init_model([8, 16, 6], seed=5))
        one_shot_clustering_round(server, clients, cfg)
        cluster_of = dict(server.assignment.client_to_cluster)

        calls = []
        real = federation.local_train

        def spy(model, shard, train_cfg, anchor=None, round_index=0):
            calls.append((shard.client_id, model))
            return real(model, shard, train_cfg, anchor=anchor, round_index=round_index)

        monkeypatch.setattr(federation, "local_train", spy)
        snapshots = []

        real_agg = federation.fedavg_aggregate

        def agg_spy(updates):
            out = real_agg(updates)
            snapshots.append(out)
            return out

        monkeypatch.setattr(federation, "fedavg_aggregate", agg_spy)
        run_cluster_rounds(server, clients, cfg)
        assert calls
        # group training calls into rounds of len(clients) calls each; within
        # a round, all members of one cluster share the identical start model
        for client_id, start_model in calls:
            k = cluster_of[client_id]
            peers = [m for cid, m in calls if cluster_of[cid] == k and m is start_model]
            others = [m for cid, m in calls if cluster_of[cid] != k and m is start_model]
            assert peers and not others

    def test_deterministic_reports(self):
        clients_a, _, _ = two_group_clients(seed=6)
        clients_b, _, _ = two_group_clients(seed=6)
        cfg = quick_cfg(seed=6, rounds=3)
        model = init_model([8, 16, 6], seed=6)
        ra, _ = run_fedclust(clients_a, cfg, model)
        rb, _ = run_fedclust(clients_b, cfg, model)
        assert ra.records == rb.records
        assert ra.assignment.client_to_cluster == rb.assignment.client_to_cluster
        for k in ra.final_models:
            assert models_equal(ra.final_models[k], rb.final_models[k])


class TestSingleClusterEquivalence:
    def test_forced_single_cluster_matches_fedavg_bitwise(self):
        clients_a, _, _ = two_group_clients(seed=7)
        clients_b, _, _ = two_group_clients(seed=7)
        train = TrainConfig(local_epochs=1, batch_size=16, learning_rate=0.1, seed=7)
        cfg = RoundConfig(
            total_rounds=4, train=train, clustering_round_epochs=2, per_round_epochs=2
        )
        clustered, _ = run_fedclust(clients_a, cfg, init_model([8, 16, 6], seed=7),
                                    cut=CutCriterion.fixed_k(1))
        plain = run_fedavg(clients_b, cfg, init_model([8, 16, 6], seed=7))
        assert models_equal(clustered.final_models[0], plain.final_models[0])
        assert clustered.records == plain.records


class TestRunFedavg:
    def test_single_client_is_uninterrupted_local_training(self):
        ds = synth_blobs(num_classes=3, dim=4, samples_per_class=20, spread=1.0, seed=8)
        shard = ClientShard(0, ds, np.arange(ds.n))
        clients = [ClientRecord(client_id=0, shard=shard)]
        train = TrainConfig(local_epochs=1, batch_size=8, learning_rate=0.1, seed=8)
        cfg = RoundConfig(total_rounds=3, train=train, per_round_epochs=2)
        model = init_model([4, 6, 3], seed=8)
        report = run_fedavg(clients, cfg, model)
        manual = model.copy()
        step_cfg = TrainConfig(local_epochs=2, batch_size=8, learning_rate=0.1, seed=8)
        for r in range(3):
            manual = local_train(manual, shard, step_cfg, round_index=r)
        assert models_equal(report.final_models[0], manual)

    def test_identical_shards_and_streams_are_a_fixed_point(self):
        ds = synth_blobs(num_classes=3, dim=4, samples_per_class=20, spread=1.0, seed=9)
        shard = ClientShard(0, ds, np.arange(ds.n))
        # distinct records sharing one shard (same training stream)
        clients = [ClientRecord(client_id=0, shard=shard), ClientRecord(client_id=1, shard=shard)]
        cfg = quick_cfg(seed=9, rounds=2)
        model = init_model([4, 6, 3], seed=9)
        report = run_fedavg(clients, cfg, model)
        solo = run_fedavg([ClientRecord(client_id=0, shard=shard)], cfg, model)
        assert models_equal(report.final_models[0], solo.final_models[0])

    def test_deterministic(self):
        clients, _, _ = two_group_clients(seed=10)
        cfg = quick_cfg(seed=10)
        model = init_model([8, 16, 6], seed=10)
        a = run_fedavg(clients, cfg, model)
        b = run_fedavg(clients, cfg, model)
        assert a.records == b.records
        assert models_equal(a.final_models[0], b.final_models[0])


class TestRunFedprox:
    def test_stronger_mu_pins_updates_closer_to_global(self):
        # within the stable step-size range (lr * mu < 2) the proximal pull
        # shrinks how far one round moves the aggregate from the start model
        clients, _, _ = two_group_clients(seed=11)
        model = init_model([8, 16, 6], seed=11)

        def round1_drift(mu):
            train = TrainConfig(
                local_epochs=1, batch_size=16, learning_rate=0.05, prox_mu=mu, seed=11
            )
            cfg = RoundConfig(total_rounds=1, train=train, per_round_epochs=2)
            runner = run_fedprox if mu > 0 else run_fedavg
            report = runner(clients, cfg, model)
            out = report.final_models[0]
            return max(
                np.abs(a.weights - b.weights).max() for a, b in zip(out.layers, model.layers)
            )

        drifts = [round1_drift(mu) for mu in (0.0, 5.0, 20.0)]
        assert drifts[2] < drifts[1] < drifts[0]
        assert drifts[2] < 0.25 * drifts[0]

    def test_mu_zero_warns_and_matches_fedavg(self):
        clients, _, _ = two_group_clients(seed=12)
        cfg = quick_cfg(seed=12)
        model = init_model([8, 16, 6], seed=12)
        with pytest.warns(UserWarning):
            prox = run_fedprox(clients, cfg, model)
        plain = run_fedavg(clients, cfg, model)
        assert models_equal(prox.final_models[0], plain.final_models[0])
        assert prox.records == plain.records

    def test_prox_changes_training_when_active(self):
        clients, _, _ = two_group_clients(seed=13)
        model = init_model([8, 16, 6], seed=13)
        train = TrainConfig(local_epochs=1, batch_size=16, learning_rate=0.1, prox_mu=0.5, seed=13)
        cfg = RoundConfig(total_rounds=2, train=train, per_round_epochs=1)
        prox = run_fedprox(clients, cfg, model)
        plain_cfg = RoundConfig(
            total_rounds=2,
            train=TrainConfig(local_epochs=1, batch_size=16, learning_rate=0.1, seed=13),
            per_round_epochs=1,
        )
        plain = run_fedavg(clients, plain_cfg, model)
        assert not models_equal(prox.final_models[0], plain.final_models[0])


class TestParticipation:
    def test_partial_participation_is_deterministic_and_bounded(self):
        clients, _, _ = two_group_clients(seed=14)
        cfg = quick_cfg(seed=14, rounds=4, frac=0.5)
        model = init_model([8, 16, 6], seed=14)
        a = run_fedavg([ClientRecord(c.client_id, c.shard) for c in clients], cfg, model)
        b = run_fedavg([ClientRecord(c.client_id, c.shard) for c in clients], cfg, model)
        assert a.records == b.records

    def test_fraction_yields_expected_count(self):
        members = [ClientRecord(client_id=i, shard=None) for i in range(10)]
        picked = federation._select_participants(members, 0.3, seed=0, round_index=1, cluster_id=0)
        assert len(picked) == 3
        assert [c.client_id for c in picked] == sorted(c.client_id for c in picked)
        tiny = federation._select_participants(members[:2], 0.1, seed=0, round_index=0, cluster_id=0)
        assert len(tiny) == 1  # at least one participant


class TestNewcomer:
    def test_twin_joins_twins_cluster_and_registry_grows(self):
        clients, _, ds = two_group_clients(seed=15)
        cfg = quick_cfg(seed=15)
        server = ServerState(global_model=init_model([8, 16, 6], seed=15))
        one_shot_clustering_round(server, clients, cfg)
        uploads_before = server.clustering_uploads
        twin_of = clients[0]
        # same underlying shard (same training stream), new record id
        newcomer = ClientRecord(client_id=99, shard=twin_of.shard)
        sizes_before = {k: len(v) for k, v in server.weight_registry.items()}
        cluster_id, model = accommodate_newcomer(server, newcomer, cfg)
        assert cluster_id == twin_of.cluster
        assert newcomer.cluster == cluster_id
        assert server.clustering_uploads == uploads_before + 1
        assert len(server.weight_registry[cluster_id]) == sizes_before[cluster_id] + 1
        assert models_equal(model, server.cluster_models[cluster_id])
        assert server.assignment.client_to_cluster[99] == cluster_id

    def test_single_cluster_server_takes_everyone(self):
        ds = synth_blobs(num_classes=3, dim=4, samples_per_class=20, spread=1.0, seed=16)
        shard = ClientShard(0, ds, np.arange(ds.n))
        clients = [ClientRecord(client_id=0, shard=shard)]
        cfg = quick_cfg(seed=16)
        server = ServerState(global_model=init_model([4, 6, 3], seed=16))
        one_shot_clustering_round(server, clients, cfg)
        newcomer = ClientRecord(client_id=1, shard=ClientShard(1, ds, np.arange(ds.n)))
        cluster_id, _ = accommodate_newcomer(server, newcomer, cfg)
        assert cluster_id == 0

    def test_errors(self):
        clients, _, _ = two_group_clients(seed=17)
        cfg = quick_cfg(seed=17)
        server = ServerState(global_model=init_model([8, 16, 6], seed=17))
        fresh = ClientRecord(client_id=50, shard=clients[0].shard)
        with pytest.raises(StateError):
            accommodate_newcomer(server, fresh, cfg)
        one_shot_clustering_round(server, clients, cfg)
        with pytest.raises(StateError):
            accommodate_newcomer(server, clients[0], cfg)  # already clustered member
        accommodate_newcomer(server, fresh, cfg)
        with pytest.raises(StateError):
            accommodate_newcomer(server, fresh, cfg)  # cannot join twice


class TestParallelMode:
    def test_parallel_equals_sequential_bitwise(self):
        clients_a, _, _ = two_group_clients(seed=18)
        clients_b, _, _ = two_group_clients(seed=18)
        cfg = quick_cfg(seed=18, rounds=3)
        model = init_model([8, 16, 6], seed=18)
        seq, _ = run_fedclust(clients_a, cfg, model, parallel=False)
        par, _ = run_fedclust(clients_b, cfg, model, parallel=True)
        assert seq.records == par.records
        for k in seq.final_models:
            assert models_equal(seq.final_models[k], par.final_models[k])


class TestServerState:
    def test_layer_index_resolution(self):
        model = init_model([4, 6, 3], seed=0)
        assert ServerState(global_model=model).layer_index == 1
        assert ServerState(global_model=model, layer_index=0).layer_index == 0
        assert ServerState(global_model=model, layer_index=-2).layer_index == 0
        with pytest.raises(ConfigError):
            ServerState(global_model=model, layer_index=2)

    def test_round_config_validation(self):
        train = TrainConfig(local_epochs=1, batch_size=4, learning_rate=0.1)
        with pytest.raises(ConfigError):
            RoundConfig(total_rounds=0, train=train)
        with pytest.raises(ConfigError):
            RoundConfig(total_rounds=1, train=train, participation_fraction=0.0)
        with pytest.raises(ConfigError):
            RoundConfig(total_rounds=1, train=train, participation_fraction=1.5)
        with pytest.raises(ConfigError):
            RoundConfig(total_rounds=1, train=train, per_round_epochs=-1)
