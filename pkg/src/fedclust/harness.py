"""Config-driven experiment harness behind the CLI.

Builds datasets and clients from an ExperimentConfig, dispatches to the
protocol runners, and persists every artifact: metrics CSV, structured
report, proximity matrices (CSV + PGM), and PNG figures. The library calls
here are the same ones a user would make interactively, so every file is
reproducible without the CLI.
"""

from __future__ import annotations

import math
import time
from contextlib import contextmanager
from dataclasses import replace
from pathlib import Path

import numpy as np
import yaml

from . import figures
from .clustering import ClusterAssignment, adjusted_rand_index, per_layer_proximity
from .config import ExperimentConfig, config_from_mapping, config_to_mapping, load_config
from .data import (
    ClientShard,
    LabeledDataset,
    PartitionGroundTruth,
    dirichlet_partition,
    label_shard_partition,
    load_csv_dataset,
    stratified_test_indices,
    synth_blobs,
    train_test_split,
)
from .errors import ConfigError, FedClustError
from .federation import (
    ClientRecord,
    broadcast_train,
    run_fedavg,
    run_fedclust,
    run_fedprox,
)
from .matrixio import export_heatmap, save_matrix_csv
from .nn import STREAM_DATA, init_model
from .reports import ExperimentReport, write_metrics_csv


@contextmanager
def _phase(name: str):
    """Tag runtime failures with the pipeline phase; config errors pass through."""
    try:
        yield
    except ConfigError:
        raise
    except FedClustError as exc:
        exc.args = (f"[{name}] {exc}",)
        raise


def override_seed(config: ExperimentConfig, seed: int) -> ExperimentConfig:
    """New config with the seed replaced everywhere it is threaded."""
    if seed < 0:
        raise ConfigError(f"seed: must be >= 0, got {seed}")
    train = replace(config.rounds.train, seed=seed)
    return replace(config, seed=seed, rounds=replace(config.rounds, train=train))


def build_dataset(config: ExperimentConfig) -> LabeledDataset:
    spec = config.dataset
    if spec.kind == "blobs":
        return synth_blobs(
            spec.num_classes, spec.dim, spec.samples_per_class, spec.spread, config.seed
        )
    dataset = load_csv_dataset(spec.path)
    if spec.num_classes:
        dataset = LabeledDataset(dataset.features, dataset.labels, spec.num_classes)
    if config.layer_dims[0] != dataset.dim:
        raise ConfigError(
            f"model.layer_dims[0]={config.layer_dims[0]} must equal the "
            f"CSV feature dim {dataset.dim}"
        )
    if config.layer_dims[-1] != dataset.num_classes:
        raise ConfigError(
            f"model.layer_dims[-1]={config.layer_dims[-1]} must equal the "
            f"CSV class count {dataset.num_classes}"
        )
    return dataset


def _split_local_test(
    shard: ClientShard, fraction: float, seed: int
) -> tuple[ClientShard, ClientShard | None]:
    """Carve a stratified local test shard out of a client's shard.

    Falls back to no test data when the split would leave nothing to train
    on (tiny shards under heavy skew).
    """
    if fraction <= 0 or shard.n_i < 2:
        return shard, None
    rng = np.random.default_rng([STREAM_DATA, seed, 3, shard.client_id])
    positions = stratified_test_indices(shard.labels, fraction, rng)
    if len(positions) == 0 or len(positions) >= shard.n_i:
        return shard, None
    test = ClientShard(shard.client_id, shard.dataset, shard.indices[positions])
    train = ClientShard(shard.client_id, shard.dataset, np.delete(shard.indices, positions))
    return train, test


def build_clients(
    config: ExperimentConfig, dataset: LabeledDataset
) -> tuple[list[ClientRecord], LabeledDataset | None, PartitionGroundTruth | None]:
    """Split data into (clients, optional global test set, optional ground truth)."""
    if config.evaluation.global_test_fraction > 0:
        pool, global_test = train_test_split(
            dataset, config.evaluation.global_test_fraction, config.seed
        )
    else:
        pool, global_test = dataset, None
    if config.partition.kind == "dirichlet":
        shards = dirichlet_partition(
            pool, config.partition.num_clients, config.partition.alpha, config.seed
        )
        ground_truth = None
    else:
        shards, ground_truth = label_shard_partition(
            pool, [(list(c), list(k)) for c, k in config.partition.groups], config.seed
        )
    clients = []
    for shard in shards:
        train_shard, test_shard = _split_local_test(
            shard, config.evaluation.test_fraction, config.seed
        )
        clients.append(
            ClientRecord(client_id=shard.client_id, shard=train_shard, test_shard=test_shard)
        )
    return clients, global_test, ground_truth


def _ground_truth_assignment(truth: PartitionGroundTruth) -> ClusterAssignment:
    groups: dict[int, list[int]] = {}
    for client, group in truth.client_to_group.items():
        groups.setdefault(group, []).append(client)
    return ClusterAssignment.from_groups(list(groups.values()))


def run_experiment(config: ExperimentConfig, parallel: bool = False) -> ExperimentReport:
    """Execute the configured method end to end; no files are written."""
    started = time.perf_counter()
    with _phase("data"):
        dataset = build_dataset(config)
        clients, global_test, ground_truth = build_clients(config, dataset)
        model = init_model(list(config.layer_dims), config.seed)
    with _phase("run"):
        if config.method == "fedclust":
            report, _server = run_fedclust(
                clients,
                config.rounds,
                model,
                linkage=config.clustering.linkage,
                cut=config.clustering.cut,
                layer_index=config.clustering.layer_index,
                global_test=global_test,
                parallel=parallel,
            )
        elif config.method == "fedavg":
            report = run_fedavg(
                clients, config.rounds, model, global_test=global_test, parallel=parallel
            )
        elif config.method == "fedprox":
            report = run_fedprox(
                clients, config.rounds, model, global_test=global_test, parallel=parallel
            )
        else:  # layer_analysis
            ordered = sorted(clients, key=lambda c: c.client_id)
            train_cfg = config.rounds.phase_train(config.rounds.clustering_round_epochs)
            local_models = broadcast_train(ordered, model, train_cfg, 0, parallel=parallel)
            num_layers = len(config.layer_dims) - 1
            report = ExperimentReport(method="layer_analysis", seed=config.seed)
            report.proximity_matrices = {
                layer: per_layer_proximity(local_models, layer) for layer in range(num_layers)
            }
        if ground_truth is not None and report.assignment is not None:
            report.ari = adjusted_rand_index(
                report.assignment, _ground_truth_assignment(ground_truth)
            )
    report.wall_clock_seconds = time.perf_counter() - started
    report.config_echo = config_to_mapping(config)
    return report


def _report_text(report: ExperimentReport) -> str:
    summary = {
        "method": report.method,
        "seed": report.seed,
        "rounds_recorded": len({r.round_index for r in report.records}),
        "num_clusters": report.assignment.num_clusters if report.assignment else None,
        "ari": report.ari,
        "final_test_acc_global": _none_if_nan(report.final_test_acc_global()),
        "final_test_acc_local": _none_if_nan(report.final_test_acc_local()),
        "wall_clock_seconds": round(report.wall_clock_seconds, 3),
    }
    body: dict = {"summary": summary}
    if report.assignment is not None:
        body["assignment"] = dict(sorted(report.assignment.client_to_cluster.items()))
    body["config"] = report.config_echo
    return yaml.safe_dump(body, sort_keys=False)


def _none_if_nan(value: float) -> float | None:
    return None if math.isnan(value) else value


def write_outputs(report: ExperimentReport, out_dir: str | Path) -> Path:
    """Persist metrics, matrices, report text, and figures; returns the dir."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with _phase("report"):
        write_metrics_csv(report.records, out / "metrics.csv")
        (out / "report.txt").write_text(_report_text(report))
        for layer, matrix in sorted(report.proximity_matrices.items()):
            save_matrix_csv(matrix, out / f"proximity_layer{layer}.csv")
            export_heatmap(matrix, out / f"proximity_layer{layer}.pgm")
            figures.save_heatmap(
                matrix, out / f"proximity_layer{layer}.png", title=f"layer {layer} distances"
            )
        if report.records:
            figures.save_round_curves(report.records, out / "curves.png")
    return out


def run_from_config_file(
    path: str | Path,
    seed: int | None = None,
    out: str | Path | None = None,
    parallel: bool = False,
) -> tuple[ExperimentReport, Path]:
    """CLI `run` verb: load, apply overrides, run, write artifacts."""
    config = load_config(path)
    if seed is not None:
        config = override_seed(config, seed)
    out_dir = Path(out) if out is not None else None
    if out_dir is None:
        if config.out_dir is None:
            raise ConfigError("out_dir: set it in the config or pass --out")
        out_dir = Path(config.out_dir)
    report = run_experiment(config, parallel=parallel)
    write_outputs(report, out_dir)
    return report, out_dir


def _require_comparable(configs: list[ExperimentConfig], paths: list) -> None:
    first = configs[0]
    for cfg, path in zip(configs[1:], paths[1:]):
        if cfg.dataset != first.dataset:
            raise ConfigError(f"{path}: dataset section differs from {paths[0]}")
        if cfg.partition != first.partition:
            raise ConfigError(f"{path}: partition section differs from {paths[0]}")
        if cfg.seed != first.seed:
            raise ConfigError(f"{path}: seed differs from {paths[0]}; use --seeds to sweep")
        if cfg.evaluation != first.evaluation:
            raise ConfigError(f"{path}: evaluation section differs from {paths[0]}")


def compare_configs(
    paths: list,
    seeds: list[int] | None = None,
    out: str | Path | None = None,
    parallel: bool = False,
) -> tuple[str, list[dict]]:
    """CLI `compare` verb: run each config over the seeds, tabulate finals.

    Returns (formatted table, rows). Std deviations are population std over
    the seed sweep (0.0 for a single seed).
    """
    if len(paths) < 2:
        raise ConfigError("compare needs at least two config paths")
    configs = [load_config(p) for p in paths]
    _require_comparable(configs, paths)
    seed_list = seeds if seeds else [configs[0].seed]
    rows = []
    for path, config in zip(paths, configs):
        finals_global, finals_local = [], []
        for seed in seed_list:
            report = run_experiment(override_seed(config, seed), parallel=parallel)
            finals_global.append(report.final_test_acc_global())
            finals_local.append(report.final_test_acc_local())
        rows.append(
            {
                "label": f"{config.method}:{Path(path).stem}",
                "method": config.method,
                "config": str(path),
                "num_seeds": len(seed_list),
                "mean_acc_global": _nanmean(finals_global),
                "std_acc_global": _nanstd(finals_global),
                "mean_acc_local": _nanmean(finals_local),
                "std_acc_local": _nanstd(finals_local),
            }
        )
    table = _format_table(rows)
    if out is not None:
        out_dir = Path(out)
        out_dir.mkdir(parents=True, exist_ok=True)
        _write_compare_csv(rows, out_dir / "compare.csv")
        figures.save_comparison_chart(rows, out_dir / "compare.png")
    return table, rows


def _nanmean(values: list[float]) -> float:
    kept = [v for v in values if not math.isnan(v)]
    return float(np.mean(kept)) if kept else math.nan


def _nanstd(values: list[float]) -> float:
    kept = [v for v in values if not math.isnan(v)]
    return float(np.std(kept)) if kept else math.nan


def _format_table(rows: list[dict]) -> str:
    header = ("method", "config", "seeds", "acc_global (mean±std)", "acc_local (mean±std)")
    body = [
        (
            row["method"],
            Path(row["config"]).name,
            str(row["num_seeds"]),
            _pm(row["mean_acc_global"], row["std_acc_global"]),
            _pm(row["mean_acc_local"], row["std_acc_local"]),
        )
        for row in rows
    ]
    widths = [max(len(header[i]), *(len(b[i]) for b in body)) for i in range(len(header))]
    lines = ["  ".join(h.ljust(widths[i]) for i, h in enumerate(header))]
    lines.append("  ".join("-" * w for w in widths))
    lines.extend("  ".join(b[i].ljust(widths[i]) for i in range(len(header))) for b in body)
    return "\n".join(lines)


def _pm(mean: float, std: float) -> str:
    if math.isnan(mean):
        return "n/a"
    return f"{mean:.4f}±{std:.4f}"


def _write_compare_csv(rows: list[dict], path: Path) -> None:
    columns = (
        "method",
        "config",
        "num_seeds",
        "mean_acc_global",
        "std_acc_global",
        "mean_acc_local",
        "std_acc_local",
    )
    lines = [",".join(columns)]
    for row in rows:
        lines.append(
            ",".join(
                repr(row[c]) if isinstance(row[c], float) else str(row[c]) for c in columns
            )
        )
    path.write_text("\n".join(lines) + "\n")


def rerun_from_report(report_path: str | Path, parallel: bool = False) -> ExperimentReport:
    """Re-execute an experiment from the config echo inside its report file."""
    body = yaml.safe_load(Path(report_path).read_text())
    if not isinstance(body, dict) or "config" not in body:
        raise ConfigError(f"{report_path}: no config echo found")
    config = config_from_mapping(body["config"], source=f"{report_path}#config")
    return run_experiment(config, parallel=parallel)
