"""Per-round metrics records and their delimited on-disk form.

The CSV schema is fixed: one row per (round, cluster), floats written via
repr so reruns of the same config are byte-identical.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from typing import TYPE_CHECKING

if TYPE_CHECKING:
    from .clustering import ClusterAssignment, ProximityMatrix
    from .nn import LayeredModel

METRICS_HEADER = "round,cluster_id,train_loss,test_acc_global,test_acc_local,num_clients"


@dataclass(frozen=True)
class RoundRecord:
    """Metrics for one cluster after one aggregation round."""

    round_index: int
    cluster_id: int
    train_loss: float
    test_acc_global: float  # nan when no global test set is configured
    test_acc_local: float  # nan when no member has local test data
    num_clients: int


@dataclass
class ExperimentReport:
    """Everything one run produces: records, final models, clustering artifacts."""

    method: str
    seed: int
    records: list[RoundRecord] = field(default_factory=list)
    assignment: "ClusterAssignment | None" = None
    ari: float | None = None  # vs ground truth, when one exists
    proximity_matrices: "dict[int, ProximityMatrix]" = field(default_factory=dict)
    final_models: "dict[int, LayeredModel]" = field(default_factory=dict)
    wall_clock_seconds: float = 0.0
    config_echo: dict | None = None

    def final_round(self) -> list[RoundRecord]:
        if not self.records:
            return []
        last = max(r.round_index for r in self.records)
        return [r for r in self.records if r.round_index == last]

    def final_test_acc_global(self) -> float:
        """Client-count-weighted global accuracy over the last round's clusters."""
        return _weighted_final(self.final_round(), "test_acc_global")

    def final_test_acc_local(self) -> float:
        return _weighted_final(self.final_round(), "test_acc_local")


def _weighted_final(rows: list[RoundRecord], attr: str) -> float:
    pairs = [(getattr(r, attr), r.num_clients) for r in rows]
    pairs = [(v, w) for v, w in pairs if not math.isnan(v) and w > 0]
    if not pairs:
        return math.nan
    total = sum(w for _, w in pairs)
    return sum(v * w for v, w in pairs) / total


def _cell(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_metrics_csv(records: list[RoundRecord], path: str | os.PathLike) -> None:
    rows = sorted(records, key=lambda r: (r.round_index, r.cluster_id))
    lines = [METRICS_HEADER]
    for r in rows:
        lines.append(
            ",".join(
                _cell(v)
                for v in (
                    r.round_index,
                    r.cluster_id,
                    r.train_loss,
                    r.test_acc_global,
                    r.test_acc_local,
                    r.num_clients,
                )
            )
        )
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")
