"""Evaluation metrics over simulation results.

All metrics are pure functions of a SimResult (plus the compiled
universe where re-pricing is needed), so they are replayable from
result files.  QoS satisfaction is pooled across models by default;
the per-model breakdown is provided as a companion.

The efficiency metric follows the convention that fine-grained
layer-wise allocation is the unit baseline: it is the ratio of
layer-wise-optimal core-seconds (each layer at its own minimum core
count for the interference it actually saw) to the core-seconds the
schedule consumed.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Sequence

from .compiler import CompiledModel
from .domain import Query
from .engine import SimResult, price_block, seconds_to_ns
from .perfmodel import MachineSpec, latency, min_core_requirement
from .scheduler import planning_budget

__all__ = [
    "measured_queries",
    "qos_satisfaction",
    "per_model_satisfaction",
    "average_latency",
    "cpu_usage_efficiency",
    "conflict_rate",
    "replay_ok",
    "Qps95Summary",
    "qps_at_95",
    "CSV_COLUMNS",
    "write_sweep_csv",
]

# Tolerated satisfaction jitter before the empirical monotonicity
# precondition of the QPS-at-95% search is considered violated.
MONOTONICITY_SLACK = 0.02

SATISFACTION_TARGET = 0.95

CSV_COLUMNS = (
    "strategy",
    "lambda",
    "seed",
    "satisfaction",
    "avg_latency_ms",
    "efficiency",
    "conflict_rate",
    "qps95_low",
    "qps95_high",
)


def measured_queries(result: SimResult) -> list[Query]:
    """Queries inside the measurement window (warm-up/cool-down trimmed)."""
    lo, hi = result.metadata["measured_window_s"]
    return [q for q in result.queries if lo <= q.arrival_s <= hi]


def qos_satisfaction(result: SimResult) -> float:
    """Fraction of measured queries finishing within their deadline."""
    window = measured_queries(result)
    if not window:
        raise ValueError("empty measurement window")
    met = sum(1 for q in window if q.met_deadline)
    return met / len(window)


def per_model_satisfaction(result: SimResult) -> dict[str, float]:
    window = measured_queries(result)
    by_model: dict[str, list[Query]] = {}
    for q in window:
        by_model.setdefault(q.model_id, []).append(q)
    return {
        mid: sum(1 for q in qs if q.met_deadline) / len(qs)
        for mid, qs in sorted(by_model.items())
    }


def average_latency(result: SimResult) -> float:
    """Arithmetic mean of (finish - arrival) over measured queries, seconds."""
    window = measured_queries(result)
    if not window:
        raise ValueError("empty measurement window")
    return sum(q.latency_s for q in window) / len(window)


def _universe_index(universe: Sequence[CompiledModel]) -> dict[str, CompiledModel]:
    return {cm.spec.model_id: cm for cm in universe}


def cpu_usage_efficiency(
    result: SimResult,
    universe: Sequence[CompiledModel],
    machine: MachineSpec | None = None,
) -> float:
    """Layer-wise-optimal core-seconds / consumed core-seconds.

    The numerator re-prices every executed layer at its own minimum
    core count for the block's chosen version and observed
    interference; the denominator is what the schedule actually held
    (conflict overhead included).
    """
    mach = machine or MachineSpec.from_dict(result.metadata["machine"])
    index = _universe_index(universe)
    optimal = 0.0
    consumed = 0.0
    for q in measured_queries(result):
        spec = index[q.model_id].spec
        for trace in q.per_block_trace:
            begin, end = trace.block.layer_range
            # Core-usage gap: bill each executed layer's actual time at
            # the minimum core count the planning context would have
            # given it, against the cores the schedule actually held.
            # Conflict-free per-layer scheduling is then the unit
            # baseline by construction.
            plan_i = trace.interference_predicted
            for layer, vid, cores, seg_i in zip(
                spec.layers[begin:end],
                trace.block.chosen_variant_per_layer,
                trace.cores_per_layer,
                trace.interference_per_layer,
            ):
                variant = next(v for v in layer.variants if v.variant_id == vid)
                req = min(
                    min_core_requirement(
                        layer,
                        variant,
                        plan_i,
                        mach.total_cores,
                        budget_s=planning_budget(layer.qos_budget_s),
                    ),
                    mach.total_cores,
                )
                seg_time = latency(layer, variant, cores, seg_i, mach.total_cores)
                optimal += req * latency(layer, variant, req, seg_i, mach.total_cores)
                consumed += cores * seg_time
            consumed += trace.cores_per_layer[0] * trace.overhead_s
    if consumed == 0.0:
        raise ValueError("no executed blocks in measurement window")
    return optimal / consumed


def conflict_rate(result: SimResult) -> float:
    """Conflicted allocation events / total allocation events."""
    total = 0
    conflicted = 0
    for q in measured_queries(result):
        for trace in q.per_block_trace:
            total += 1
            conflicted += trace.conflicted
    if total == 0:
        return 0.0
    return conflicted / total


def replay_ok(result: SimResult, universe: Sequence[CompiledModel]) -> bool:
    """Re-price every trace through the performance model and compare
    with the recorded durations, exactly (integer nanoseconds).

    Each layer segment is re-priced at the cores and pressure it ran
    under; segment nanoseconds and the conflict overhead must add up to
    the recorded block duration."""
    index = _universe_index(universe)
    total_cores = result.metadata["machine"]["total_cores"]
    for q in result.queries:
        for trace in q.per_block_trace:
            spec = index[q.model_id].spec
            begin, end = trace.block.layer_range
            members = spec.layers[begin:end]
            variants = [
                next(v for v in l.variants if v.variant_id == vid)
                for l, vid in zip(members, trace.block.chosen_variant_per_layer)
            ]
            expected_ns = seconds_to_ns(trace.overhead_s)
            for layer, variant, cores, seg_i in zip(
                members, variants, trace.cores_per_layer, trace.interference_per_layer
            ):
                expected_ns += seconds_to_ns(
                    latency(layer, variant, cores, seg_i, total_cores)
                )
            recorded_ns = seconds_to_ns(trace.end_s) - seconds_to_ns(trace.start_s)
            if expected_ns != recorded_ns:
                return False
    return True


@dataclass(frozen=True)
class Qps95Summary:
    """Bracketing answer of the QPS-at-95%-satisfied search."""

    strategy: str
    qps95_low: float | None
    qps95_high: float | None
    flags: tuple[str, ...] = ()

    @property
    def comparable(self) -> float:
        """Scalar for directional comparisons (low edge; 0 if none passed)."""
        return self.qps95_low if self.qps95_low is not None else 0.0


def qps_at_95(
    strategy: str,
    grid: Sequence[float],
    satisfaction_by_cell: dict[tuple[float, int], float],
    seeds: Sequence[int],
) -> Qps95Summary:
    """Largest tested rate keeping mean satisfaction at the target.

    ``satisfaction_by_cell`` maps (rate, seed) to the measured
    satisfaction.  Satisfaction is assumed non-increasing in the rate;
    the assumption is checked per seed (with a small jitter slack) and
    on violation the full range endpoints are returned, flagged.
    """
    grid = sorted(grid)
    if not grid:
        raise ValueError("rate grid must be non-empty")
    for seed in seeds:
        series = [satisfaction_by_cell[(lam, seed)] for lam in grid]
        for a, b in zip(series, series[1:]):
            if b > a + MONOTONICITY_SLACK:
                return Qps95Summary(
                    strategy,
                    qps95_low=grid[0],
                    qps95_high=grid[-1],
                    flags=("monotonicity_violated",),
                )
    means = [
        sum(satisfaction_by_cell[(lam, seed)] for seed in seeds) / len(seeds)
        for lam in grid
    ]
    passing = [lam for lam, m in zip(grid, means) if m >= SATISFACTION_TARGET]
    if not passing:
        return Qps95Summary(strategy, None, grid[0], flags=("infeasible",))
    low = passing[-1]
    above = [lam for lam in grid if lam > low]
    if not above:
        return Qps95Summary(strategy, low, None, flags=("unsaturated",))
    return Qps95Summary(strategy, low, above[0])


def write_sweep_csv(
    path: str,
    cell_rows: Sequence[dict],
    summaries: Sequence[Qps95Summary],
) -> None:
    """Plot-ready CSV: one row per (strategy, rate, seed) cell plus one
    summary row per strategy carrying the QPS-at-95% bracket."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS, quoting=csv.QUOTE_MINIMAL)
        writer.writeheader()
        for row in cell_rows:
            writer.writerow({col: row.get(col, "") for col in CSV_COLUMNS})
        for summary in summaries:
            writer.writerow(
                {
                    "strategy": summary.strategy,
                    "lambda": "",
                    "seed": "",
                    "satisfaction": "",
                    "avg_latency_ms": "",
                    "efficiency": "",
                    "conflict_rate": "",
                    "qps95_low": "" if summary.qps95_low is None else summary.qps95_low,
                    "qps95_high": "" if summary.qps95_high is None else summary.qps95_high,
                }
            )
