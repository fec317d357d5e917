"""Structured run outputs: routing traces, metrics, parameter census."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field


@dataclass
class RoutingRecord:
    """One gate decision, as exposed to the exporters."""

    layer: int
    module: str  # "q" or "v"
    example_id: int
    task_id: str
    cluster_id: int
    expert: int
    g_max: float


@dataclass
class TaskMetrics:
    loss: float
    accuracy: float
    count: int


@dataclass
class MetricsReport:
    """Everything measured in one evaluation or training run.

    `wall_clock_seconds` is informational only and excluded from the
    canonical serialization, which otherwise round-trips bit-exactly
    for reproducibility checks.
    """

    held_in: dict[str, TaskMetrics] = field(default_factory=dict)
    held_out: dict[str, TaskMetrics] = field(default_factory=dict)
    expert_usage: dict[str, dict[str, list[int]]] = field(default_factory=dict)
    universal_weights: dict[str, float] = field(default_factory=dict)
    census: dict[str, dict] = field(default_factory=dict)
    trainable_parameters: int = 0
    frozen_parameters: int = 0
    final_train_loss: float | None = None
    wall_clock_seconds: float = 0.0

    def mean_held_in_loss(self) -> float:
        if not self.held_in:
            raise ValueError("report has no held-in metrics")
        return sum(m.loss for m in self.held_in.values()) / len(self.held_in)

    def to_dict(self, include_wall_clock: bool = True) -> dict:
        payload = asdict(self)
        if not include_wall_clock:
            payload.pop("wall_clock_seconds")
        return payload

    def canonical_json(self) -> str:
        """Deterministic serialization used for bitwise reproducibility."""
        return json.dumps(self.to_dict(include_wall_clock=False), sort_keys=True)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    @classmethod
    def from_dict(cls, payload: dict) -> "MetricsReport":
        def metrics(block: dict) -> dict[str, TaskMetrics]:
            return {k: TaskMetrics(**v) for k, v in block.items()}

        return cls(
            held_in=metrics(payload.get("held_in", {})),
            held_out=metrics(payload.get("held_out", {})),
            expert_usage=payload.get("expert_usage", {}),
            universal_weights=payload.get("universal_weights", {}),
            census=payload.get("census", {}),
            trainable_parameters=payload.get("trainable_parameters", 0),
            frozen_parameters=payload.get("frozen_parameters", 0),
            final_train_loss=payload.get("final_train_loss"),
            wall_clock_seconds=payload.get("wall_clock_seconds", 0.0),
        )

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        return cls.from_dict(json.loads(text))


def usage_histogram(trace: list[RoutingRecord], num_experts: int) -> dict[str, dict[str, list[int]]]:
    """Per-(layer,module) expert-usage counts keyed by task."""
    usage: dict[str, dict[str, list[int]]] = {}
    for record in trace:
        key = f"layer{record.layer}.{record.module}"
        per_task = usage.setdefault(key, {})
        counts = per_task.setdefault(record.task_id, [0] * num_experts)
        counts[record.expert] += 1
    return usage


def routing_purity(usage: dict[str, dict[str, list[int]]]) -> dict[str, dict[str, float]]:
    """Fraction of each task's decisions on its majority expert, per mixture."""
    purity: dict[str, dict[str, float]] = {}
    for mixture_key, per_task in usage.items():
        purity[mixture_key] = {}
        for task, counts in per_task.items():
            total = sum(counts)
            purity[mixture_key][task] = max(counts) / total if total else 0.0
    return purity


def recount_purity(trace: list[RoutingRecord], num_experts: int) -> dict[str, dict[str, float]]:
    """Standalone recount over the raw trace; must agree with the report."""
    tallies: dict[tuple[str, str], list[int]] = {}
    for record in trace:
        key = (f"layer{record.layer}.{record.module}", record.task_id)
        counts = tallies.setdefault(key, [0] * num_experts)
        counts[record.expert] += 1
    out: dict[str, dict[str, float]] = {}
    for (mixture_key, task), counts in tallies.items():
        out.setdefault(mixture_key, {})[task] = max(counts) / sum(counts)
    return out


def mean_universal_weights(trace: list[RoutingRecord]) -> dict[str, float]:
    """Per-task mean weight of the universal adapter, 1 - g_max."""
    sums: dict[str, float] = {}
    counts: dict[str, int] = {}
    for record in trace:
        sums[record.task_id] = sums.get(record.task_id, 0.0) + (1.0 - record.g_max)
        counts[record.task_id] = counts.get(record.task_id, 0) + 1
    return {task: sums[task] / counts[task] for task in sums}
