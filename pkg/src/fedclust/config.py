"""Experiment configuration: YAML loading, strict validation, and the echo
mapping that makes any run reproducible from its own report.

Every diagnostic names the offending field as a dotted path (for example
``partition.alpha``) so CLI users can fix configs without reading the code.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Any

import yaml

from .clustering import LINKAGES, CutCriterion
from .errors import ConfigError
from .federation import RoundConfig
from .nn import TrainConfig

METHODS = ("fedclust", "fedavg", "fedprox", "layer_analysis")

_REQUIRED = object()


def _fetch(section: dict, key: str, path: str, kind, default=_REQUIRED):
    if key not in section:
        if default is _REQUIRED:
            raise ConfigError(f"{path}.{key}: required field is missing")
        return default
    value = section[key]
    if kind is float and isinstance(value, int) and not isinstance(value, bool):
        value = float(value)
    if kind is not None and (not isinstance(value, kind) or isinstance(value, bool)):
        raise ConfigError(
            f"{path}.{key}: expected {kind.__name__}, got {type(value).__name__} ({value!r})"
        )
    return value


def _subsection(mapping: dict, key: str, path: str, required: bool = True) -> dict:
    if key not in mapping:
        if required:
            raise ConfigError(f"{path}{key}: required section is missing")
        return {}
    value = mapping[key]
    if not isinstance(value, dict):
        raise ConfigError(f"{path}{key}: expected a mapping, got {type(value).__name__}")
    return value


def _reject_unknown(section: dict, allowed: set[str], path: str) -> None:
    unknown = sorted(set(section) - allowed)
    if unknown:
        raise ConfigError(f"{path}: unknown keys {unknown} (allowed: {sorted(allowed)})")


def _int_list(value: Any, path: str) -> list[int]:
    if not isinstance(value, list) or not value:
        raise ConfigError(f"{path}: expected a nonempty list of integers")
    out = []
    for i, item in enumerate(value):
        if not isinstance(item, int) or isinstance(item, bool):
            raise ConfigError(f"{path}[{i}]: expected integer, got {item!r}")
        out.append(item)
    return out


@dataclass(frozen=True)
class DatasetSpec:
    kind: str  # "blobs" | "csv"
    num_classes: int = 0
    dim: int = 0
    samples_per_class: int = 0
    spread: float = 1.0
    path: str | None = None


@dataclass(frozen=True)
class PartitionSpec:
    kind: str  # "dirichlet" | "label_shards"
    num_clients: int = 0
    alpha: float = 0.0
    groups: tuple[tuple[tuple[int, ...], tuple[int, ...]], ...] = ()

    def total_clients(self) -> int:
        if self.kind == "dirichlet":
            return self.num_clients
        return sum(len(clients) for clients, _ in self.groups)


@dataclass(frozen=True)
class ClusteringSpec:
    linkage: str = "average"
    cut: CutCriterion = CutCriterion.largest_gap()
    layer_index: int = -1


@dataclass(frozen=True)
class EvalSpec:
    test_fraction: float = 0.2  # per-client local split; 0 disables
    global_test_fraction: float = 0.2  # shared stratified test set; 0 disables


@dataclass(frozen=True)
class ExperimentConfig:
    method: str
    seed: int
    dataset: DatasetSpec
    partition: PartitionSpec
    layer_dims: tuple[int, ...]
    rounds: RoundConfig
    clustering: ClusteringSpec
    evaluation: EvalSpec
    out_dir: str | None = None


def _parse_dataset(section: dict) -> DatasetSpec:
    kind = _fetch(section, "kind", "dataset", str)
    if kind == "blobs":
        _reject_unknown(
            section, {"kind", "num_classes", "dim", "samples_per_class", "spread"}, "dataset"
        )
        spec = DatasetSpec(
            kind="blobs",
            num_classes=_fetch(section, "num_classes", "dataset", int),
            dim=_fetch(section, "dim", "dataset", int),
            samples_per_class=_fetch(section, "samples_per_class", "dataset", int),
            spread=_fetch(section, "spread", "dataset", float, 1.0),
        )
        if spec.num_classes < 1 or spec.dim < 1 or spec.samples_per_class < 1:
            raise ConfigError("dataset: num_classes, dim, samples_per_class must be >= 1")
        if spec.spread < 0:
            raise ConfigError(f"dataset.spread: must be >= 0, got {spec.spread}")
        return spec
    if kind == "csv":
        _reject_unknown(section, {"kind", "path", "num_classes"}, "dataset")
        return DatasetSpec(
            kind="csv",
            path=_fetch(section, "path", "dataset", str),
            num_classes=_fetch(section, "num_classes", "dataset", int, 0),
        )
    raise ConfigError(f"dataset.kind: expected 'blobs' or 'csv', got {kind!r}")


def _parse_partition(section: dict) -> PartitionSpec:
    kind = _fetch(section, "kind", "partition", str)
    if kind == "dirichlet":
        _reject_unknown(section, {"kind", "num_clients", "alpha"}, "partition")
        spec = PartitionSpec(
            kind="dirichlet",
            num_clients=_fetch(section, "num_clients", "partition", int),
            alpha=_fetch(section, "alpha", "partition", float),
        )
        if spec.num_clients < 1:
            raise ConfigError(f"partition.num_clients: must be >= 1, got {spec.num_clients}")
        if not spec.alpha > 0:
            raise ConfigError(f"partition.alpha: must be > 0, got {spec.alpha}")
        return spec
    if kind == "label_shards":
        _reject_unknown(section, {"kind", "groups"}, "partition")
        raw_groups = section.get("groups")
        if not isinstance(raw_groups, list) or not raw_groups:
            raise ConfigError("partition.groups: expected a nonempty list of groups")
        groups = []
        for g, entry in enumerate(raw_groups):
            where = f"partition.groups[{g}]"
            if not isinstance(entry, dict):
                raise ConfigError(f"{where}: expected a mapping with clients/classes")
            _reject_unknown(entry, {"clients", "classes"}, where)
            groups.append(
                (
                    tuple(_int_list(entry.get("clients"), f"{where}.clients")),
                    tuple(_int_list(entry.get("classes"), f"{where}.classes")),
                )
            )
        return PartitionSpec(kind="label_shards", groups=tuple(groups))
    raise ConfigError(f"partition.kind: expected 'dirichlet' or 'label_shards', got {kind!r}")


def _parse_clustering(section: dict) -> ClusteringSpec:
    _reject_unknown(section, {"linkage", "cut", "k", "threshold", "layer_index"}, "clustering")
    linkage = _fetch(section, "linkage", "clustering", str, "average")
    if linkage not in LINKAGES:
        raise ConfigError(f"clustering.linkage: expected one of {LINKAGES}, got {linkage!r}")
    cut_kind = _fetch(section, "cut", "clustering", str, "largest_gap")
    try:
        if cut_kind == "fixed_k":
            cut = CutCriterion.fixed_k(_fetch(section, "k", "clustering", int))
        elif cut_kind == "distance_threshold":
            cut = CutCriterion.distance_threshold(_fetch(section, "threshold", "clustering", float))
        elif cut_kind == "largest_gap":
            for stray in ("k", "threshold"):
                if stray in section:
                    raise ConfigError(f"clustering.{stray}: not used by the largest_gap cut")
            cut = CutCriterion.largest_gap()
        else:
            raise ConfigError(
                "clustering.cut: expected fixed_k, distance_threshold or largest_gap, "
                f"got {cut_kind!r}"
            )
    except ConfigError as exc:
        if str(exc).startswith("clustering."):
            raise
        raise ConfigError(f"clustering: {exc}") from None
    return ClusteringSpec(
        linkage=linkage,
        cut=cut,
        layer_index=_fetch(section, "layer_index", "clustering", int, -1),
    )


def config_from_mapping(mapping: Any, source: str = "<config>") -> ExperimentConfig:
    """Validate a parsed config mapping and build the typed ExperimentConfig."""
    if not isinstance(mapping, dict):
        raise ConfigError(f"{source}: top level must be a mapping")
    _reject_unknown(
        mapping,
        {
            "method",
            "seed",
            "out_dir",
            "dataset",
            "partition",
            "model",
            "rounds",
            "train",
            "clustering",
            "evaluation",
        },
        source,
    )
    method = _fetch(mapping, "method", source, str)
    if method not in METHODS:
        raise ConfigError(f"method: expected one of {METHODS}, got {method!r}")
    seed = _fetch(mapping, "seed", source, int, 0)
    if seed < 0:
        raise ConfigError(f"seed: must be >= 0, got {seed}")
    out_dir = _fetch(mapping, "out_dir", source, str, None)

    dataset = _parse_dataset(_subsection(mapping, "dataset", "", required=True))
    partition = _parse_partition(_subsection(mapping, "partition", "", required=True))

    model_section = _subsection(mapping, "model", "", required=True)
    _reject_unknown(model_section, {"layer_dims"}, "model")
    layer_dims = tuple(_int_list(model_section.get("layer_dims"), "model.layer_dims"))
    if len(layer_dims) < 2:
        raise ConfigError("model.layer_dims: need at least [input_dim, num_classes]")
    if any(d < 1 for d in layer_dims):
        raise ConfigError(f"model.layer_dims: all dims must be >= 1, got {list(layer_dims)}")

    train_section = _subsection(mapping, "train", "", required=True)
    _reject_unknown(train_section, {"batch_size", "learning_rate", "prox_mu"}, "train")
    try:
        train = TrainConfig(
            local_epochs=1,  # runners override per phase
            batch_size=_fetch(train_section, "batch_size", "train", int),
            learning_rate=_fetch(train_section, "learning_rate", "train", float),
            prox_mu=_fetch(train_section, "prox_mu", "train", float, 0.0),
            seed=seed,
        )
    except ConfigError as exc:
        raise ConfigError(f"train: {exc}") from None

    rounds_section = _subsection(mapping, "rounds", "", required=True)
    _reject_unknown(
        rounds_section,
        {"total_rounds", "clustering_round_epochs", "per_round_epochs", "participation_fraction"},
        "rounds",
    )
    try:
        rounds = RoundConfig(
            total_rounds=_fetch(rounds_section, "total_rounds", "rounds", int),
            train=train,
            clustering_round_epochs=_fetch(
                rounds_section, "clustering_round_epochs", "rounds", int, 5
            ),
            per_round_epochs=_fetch(rounds_section, "per_round_epochs", "rounds", int, 1),
            participation_fraction=_fetch(
                rounds_section, "participation_fraction", "rounds", float, 1.0
            ),
        )
    except ConfigError as exc:
        raise ConfigError(f"rounds: {exc}") from None

    clustering = _parse_clustering(_subsection(mapping, "clustering", "", required=False))

    eval_section = _subsection(mapping, "evaluation", "", required=False)
    _reject_unknown(eval_section, {"test_fraction", "global_test_fraction"}, "evaluation")
    evaluation = EvalSpec(
        test_fraction=_fetch(eval_section, "test_fraction", "evaluation", float, 0.2),
        global_test_fraction=_fetch(
            eval_section, "global_test_fraction", "evaluation", float, 0.2
        ),
    )
    for name, frac in (
        ("test_fraction", evaluation.test_fraction),
        ("global_test_fraction", evaluation.global_test_fraction),
    ):
        if not 0.0 <= frac < 1.0:
            raise ConfigError(f"evaluation.{name}: must be in [0, 1), got {frac}")

    config = ExperimentConfig(
        method=method,
        seed=seed,
        dataset=dataset,
        partition=partition,
        layer_dims=layer_dims,
        rounds=rounds,
        clustering=clustering,
        evaluation=evaluation,
        out_dir=out_dir,
    )
    _check_consistency(config)
    return config


def _check_consistency(config: ExperimentConfig) -> None:
    num_layers = len(config.layer_dims) - 1
    idx = config.clustering.layer_index
    if not -num_layers <= idx < num_layers:
        raise ConfigError(
            f"clustering.layer_index: {idx} out of range for {num_layers} layers"
        )
    if config.dataset.kind == "blobs":
        if config.layer_dims[0] != config.dataset.dim:
            raise ConfigError(
                f"model.layer_dims[0]={config.layer_dims[0]} must equal "
                f"dataset.dim={config.dataset.dim}"
            )
        if config.layer_dims[-1] != config.dataset.num_classes:
            raise ConfigError(
                f"model.layer_dims[-1]={config.layer_dims[-1]} must equal "
                f"dataset.num_classes={config.dataset.num_classes}"
            )
    cut = config.clustering.cut
    if cut.kind == "fixed_k" and cut.k > config.partition.total_clients():
        raise ConfigError(
            f"clustering.k: {cut.k} exceeds the {config.partition.total_clients()} clients"
        )
    if config.rounds.train.prox_mu != 0.0 and config.method != "fedprox":
        raise ConfigError(
            f"train.prox_mu: only meaningful for method=fedprox, got method={config.method}"
        )


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config ({exc})") from None
    try:
        mapping = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML ({exc})") from None
    return config_from_mapping(mapping, source=str(path))


def config_to_mapping(config: ExperimentConfig) -> dict:
    """Plain mapping that round-trips through config_from_mapping unchanged.

    This is the config echo embedded in reports: loading it reruns the
    experiment exactly.
    """
    dataset: dict[str, Any] = {"kind": config.dataset.kind}
    if config.dataset.kind == "blobs":
        dataset.update(
            num_classes=config.dataset.num_classes,
            dim=config.dataset.dim,
            samples_per_class=config.dataset.samples_per_class,
            spread=config.dataset.spread,
        )
    else:
        dataset.update(path=config.dataset.path, num_classes=config.dataset.num_classes)
    if config.partition.kind == "dirichlet":
        partition: dict[str, Any] = {
            "kind": "dirichlet",
            "num_clients": config.partition.num_clients,
            "alpha": config.partition.alpha,
        }
    else:
        partition = {
            "kind": "label_shards",
            "groups": [
                {"clients": list(clients), "classes": list(classes)}
                for clients, classes in config.partition.groups
            ],
        }
    clustering: dict[str, Any] = {
        "linkage": config.clustering.linkage,
        "cut": config.clustering.cut.kind,
        "layer_index": config.clustering.layer_index,
    }
    if config.clustering.cut.kind == "fixed_k":
        clustering["k"] = config.clustering.cut.k
    elif config.clustering.cut.kind == "distance_threshold":
        clustering["threshold"] = config.clustering.cut.threshold
    mapping = {
        "method": config.method,
        "seed": config.seed,
        "dataset": dataset,
        "partition": partition,
        "model": {"layer_dims": list(config.layer_dims)},
        "rounds": {
            "total_rounds": config.rounds.total_rounds,
            "clustering_round_epochs": config.rounds.clustering_round_epochs,
            "per_round_epochs": config.rounds.per_round_epochs,
            "participation_fraction": config.rounds.participation_fraction,
        },
        "train": {
            "batch_size": config.rounds.train.batch_size,
            "learning_rate": config.rounds.train.learning_rate,
            "prox_mu": config.rounds.train.prox_mu,
        },
        "clustering": clustering,
        "evaluation": {
            "test_fraction": config.evaluation.test_fraction,
            "global_test_fraction": config.evaluation.global_test_fraction,
        },
    }
    if config.out_dir is not None:
        mapping["out_dir"] = config.out_dir
    return mapping
