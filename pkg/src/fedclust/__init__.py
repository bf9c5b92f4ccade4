"""Deterministic federated-learning simulator with one-shot client clustering.

Clients train a small dense network locally; the server groups them once,
from the pairwise distances between their final-layer weights, and then runs
weighted-averaging rounds per cluster. Plain averaging and proximal-term
baselines are included, plus a config-driven CLI (``python -m fedclust``).

Importing this package stays light: plotting lives in ``fedclust.figures``
and is only pulled in by the harness/CLI.
"""

from .clustering import (
    ClusterAssignment,
    CutCriterion,
    Dendrogram,
    Merge,
    ProximityMatrix,
    adjusted_rand_index,
    agglomerative_cluster,
    assign_newcomer,
    mean_intra_inter,
    per_layer_proximity,
    proximity_matrix,
)
from .config import (
    ClusteringSpec,
    DatasetSpec,
    EvalSpec,
    ExperimentConfig,
    PartitionSpec,
    config_from_mapping,
    config_to_mapping,
    load_config,
)
from .data import (
    ClientShard,
    LabeledDataset,
    PartitionGroundTruth,
    dirichlet_partition,
    label_shard_partition,
    load_csv_dataset,
    synth_blobs,
    train_test_split,
)
from .errors import (
    AggregationError,
    ConfigError,
    DataError,
    FedClustError,
    ShapeError,
    StateError,
)
from .federation import (
    ClientRecord,
    RoundConfig,
    ServerState,
    accommodate_newcomer,
    broadcast_train,
    evaluate,
    fedavg_aggregate,
    one_shot_clustering_round,
    run_cluster_rounds,
    run_fedavg,
    run_fedclust,
    run_fedprox,
)
from .matrixio import export_heatmap, load_matrix_csv, read_pgm, save_matrix_csv
from .nn import (
    DenseLayer,
    LayeredModel,
    TrainConfig,
    cross_entropy,
    flatten_layer,
    forward,
    init_model,
    local_train,
    loss_and_gradients,
    sgd_step,
)
from .reports import METRICS_HEADER, ExperimentReport, RoundRecord, write_metrics_csv

__version__ = "0.1.0"

__all__ = [
    "AggregationError",
    "ClientRecord",
    "ClientShard",
    "ClusterAssignment",
    "ClusteringSpec",
    "ConfigError",
    "CutCriterion",
    "DataError",
    "DatasetSpec",
    "Dendrogram",
    "DenseLayer",
    "EvalSpec",
    "ExperimentConfig",
    "ExperimentReport",
    "FedClustError",
    "LabeledDataset",
    "LayeredModel",
    "METRICS_HEADER",
    "Merge",
    "PartitionGroundTruth",
    "PartitionSpec",
    "ProximityMatrix",
    "RoundConfig",
    "RoundRecord",
    "ServerState",
    "ShapeError",
    "StateError",
    "TrainConfig",
    "accommodate_newcomer",
    "adjusted_rand_index",
    "agglomerative_cluster",
    "assign_newcomer",
    "broadcast_train",
    "config_from_mapping",
    "config_to_mapping",
    "cross_entropy",
    "dirichlet_partition",
    "evaluate",
    "export_heatmap",
    "fedavg_aggregate",
    "flatten_layer",
    "forward",
    "init_model",
    "label_shard_partition",
    "load_config",
    "load_csv_dataset",
    "load_matrix_csv",
    "local_train",
    "loss_and_gradients",
    "mean_intra_inter",
    "one_shot_clustering_round",
    "per_layer_proximity",
    "proximity_matrix",
    "read_pgm",
    "run_cluster_rounds",
    "run_fedavg",
    "run_fedclust",
    "run_fedprox",
    "save_matrix_csv",
    "sgd_step",
    "synth_blobs",
    "train_test_split",
    "write_metrics_csv",
]
