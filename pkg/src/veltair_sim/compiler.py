"""Offline single-pass multi-version compilation.

Pipeline per layer: apportion the model deadline over layers in
proportion to op count, drop samples that cannot meet the layer budget
at the reference core count, extract the dominant (Pareto) set on the
(block_size, parallelism) axes, stride-select up to V versions, then
prune versions whose removal keeps the min-latency envelope within 90%
across the interference grid.

Dominance is weak: j dominates i iff j != i, j.block_size >=
i.block_size and j.parallelism >= i.parallelism.  Ties in both
coordinates cannot occur (samples are unique); ties in one coordinate
keep both points.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

from .domain import ImplVariant, LayerSpec, ModelSpec, validate_model
from .perfmodel import INTERFERENCE_GRID, MachineSpec, latency, min_core_requirement
from .profile_gen import RawModel, ScheduleSample, sample_to_variant

__all__ = [
    "DEFAULT_MAX_VERSIONS",
    "CompiledModel",
    "apportion",
    "apportion_qos",
    "filter_by_qos",
    "extract_dominant",
    "select_versions",
    "prune_redundant",
    "model_core_requirement",
    "average_core_requirement",
    "compile_model",
    "compile_universe",
]

DEFAULT_MAX_VERSIONS = 5

FLAG_QOS_INFEASIBLE_SOLO = "qos_infeasible_solo"
FLAG_QOS_INFEASIBLE_MODEL = "qos_infeasible_model"



def apportion(qos_s: float, op_counts: Sequence[float]) -> list[float]:
    """Split a deadline over layers proportionally to op count.

    The last layer absorbs the floating-point residual so the budgets
    sum to the deadline exactly.
    """
    if not qos_s > 0:
        raise ValueError(f"qos must be positive, got {qos_s}")
    if any(op <= 0 for op in op_counts):
        raise ValueError("all op_counts must be positive")
    total = sum(op_counts)
    budgets = [qos_s * op / total for op in op_counts[:-1]]
    budgets.append(qos_s - sum(budgets))
    return budgets


def apportion_qos(model: ModelSpec) -> ModelSpec:
    """Fill per-layer QoS budgets of a model spec."""
    budgets = apportion(model.qos_s, [l.op_count for l in model.layers])
    layers = tuple(l.with_budget(b) for l, b in zip(model.layers, budgets))
    return ModelSpec(model.model_id, layers, model.qos_s, model.avg_core)


def filter_by_qos(
    samples: Sequence[ScheduleSample], budget_s: float
) -> list[ScheduleSample]:
    """Keep exactly the samples meeting the budget, order preserved.

    An empty result is not an error here; the compile step handles it.
    """
    if not budget_s > 0:
        raise ValueError(f"budget must be positive, got {budget_s}")
    return [s for s in samples if s.solo_time_s <= budget_s]


def extract_dominant(samples: Sequence[ScheduleSample]) -> list[ScheduleSample]:
    """Dominant set under weak dominance, sorted ascending by block_size.

    A sample survives iff no other sample is at least as large on both
    axes.  Non-empty whenever the input is non-empty, idempotent, and
    the result is an antichain.
    """
    if not samples:
        return []
    by_desc = sorted(samples, key=lambda s: (-s.block_size, -s.parallelism))
    kept: list[ScheduleSample] = []
    best_p = -1
    i = 0
    n = len(by_desc)
    while i < n:
        # Within one block_size group only the max-parallelism point
        # can survive; it does iff nothing wider beats its parallelism.
        j = i
        bs = by_desc[i].block_size
        while j < n and by_desc[j].block_size == bs:
            j += 1
        candidate = by_desc[i]  # max parallelism in group (sort order)
        if candidate.parallelism > best_p:
            kept.append(candidate)
            best_p = candidate.parallelism
        i = j
    kept.reverse()
    return kept


def select_versions(
    dominant: Sequence[ScheduleSample], max_versions: int
) -> list[ScheduleSample]:
    """Stride-pick up to ``max_versions`` from the block_size-sorted
    dominant list: indices 0, step, 2*step, ... with floor arithmetic
    (index i picks floor(i*n/V), so the picks span the frontier).

    Always includes index 0 (the smallest block size); returns the
    whole list when it is short enough.
    """
    if max_versions < 1:
        raise ValueError(f"max_versions must be >= 1, got {max_versions}")
    n = len(dominant)
    if n == 0:
        return []
    indices = sorted({i * n // max_versions for i in range(max_versions)})
    return [dominant[i] for i in indices]


def prune_redundant(
    selected: Sequence[ImplVariant],
    perf: Callable[[ImplVariant, float], float],
    levels: Sequence[float] = INTERFERENCE_GRID,
) -> list[ImplVariant]:
    """Greedily drop versions that the rest of the set nearly covers.

    A version is removable when the min-latency envelope without it
    stays within 90% of the envelope with it at every interference
    level.  Never removes the last version.
    """
    if not levels:
        raise ValueError("levels must be non-empty")
    current = list(selected)
    table = {v.variant_id: [perf(v, lvl) for lvl in levels] for v in current}

    changed = True
    while changed and len(current) > 1:
        changed = False
        for idx, victim in enumerate(current):
            rest = current[:idx] + current[idx + 1 :]
            ok = True
            for k in range(len(levels)):
                env_with = min(table[v.variant_id][k] for v in current)
                env_without = min(table[v.variant_id][k] for v in rest)
                if env_with / env_without < 0.9:
                    ok = False
                    break
            if ok:
                current = rest
                changed = True
                break
    return current


def model_core_requirement(
    layers: Sequence[LayerSpec],
    qos_s: float,
    machine: MachineSpec,
    interference: float = 0.0,
) -> int:
    """Smallest core count at which the whole model, using the best
    variant per layer at that count, meets its deadline.  Returns
    ``total_cores`` when even the full machine misses it (callers flag).
    """

    def model_latency(cores: int) -> float:
        return sum(
            min(
                latency(l, v, cores, interference, machine.total_cores)
                for v in l.variants
            )
            for l in layers
        )

    lo, hi = 1, machine.total_cores
    if model_latency(hi) > qos_s:
        return machine.total_cores
    while lo < hi:
        mid = (lo + hi) // 2
        if model_latency(mid) <= qos_s:
            hi = mid
        else:
            lo = mid + 1
    return lo


def average_core_requirement(
    layers: Sequence[LayerSpec], machine: MachineSpec
) -> int:
    """Model-granularity core count Avg_C: the per-layer core
    requirements (solo-best variant, no interference), averaged over
    the layers and rounded up."""
    total = 0
    for layer in layers:
        best = min(
            layer.variants,
            key=lambda v: latency(layer, v, machine.total_cores, 0.0, machine.total_cores),
        )
        req = min_core_requirement(layer, best, 0.0, machine.total_cores)
        total += min(req, machine.total_cores)
    return max(1, min(machine.total_cores, math.ceil(total / len(layers))))


@dataclass(frozen=True)
class CompiledModel:
    """A model spec with selected versions plus the per-layer dominant
    sets the selection was drawn from (kept for envelope reporting)."""

    spec: ModelSpec
    dominant: tuple[tuple[ImplVariant, ...], ...]

    def to_dict(self) -> dict:
        return {
            "spec": self.spec.to_dict(),
            "dominant": [[v.to_dict() for v in layer] for layer in self.dominant],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CompiledModel":
        return cls(
            spec=ModelSpec.from_dict(d["spec"]),
            dominant=tuple(
                tuple(ImplVariant.from_dict(v) for v in layer)
                for layer in d["dominant"]
            ),
        )


def compile_model(
    raw: RawModel,
    machine: MachineSpec,
    max_versions: int = DEFAULT_MAX_VERSIONS,
    qos_override_s: float | None = None,
    prune: bool = True,
) -> CompiledModel:
    """Run the full single-pass compilation for one model."""
    qos_s = qos_override_s if qos_override_s is not None else raw.qos_s
    budgets = apportion(qos_s, [l.op_count for l in raw.layers])

    selected_per_layer: list[list[ImplVariant]] = []
    dominant_per_layer: list[tuple[ImplVariant, ...]] = []
    flags_per_layer: list[tuple[str, ...]] = []
    for raw_layer, budget in zip(raw.layers, budgets):
        flags: tuple[str, ...] = ()
        feasible = filter_by_qos(raw_layer.samples, budget)
        if not feasible:
            # The deadline is unreachable even at the reference core
            # count; keep the single fastest sample and flag the layer.
            fastest = min(raw_layer.samples, key=lambda s: s.solo_time_s)
            feasible = [fastest]
            flags = (FLAG_QOS_INFEASIBLE_SOLO,)
        dominant = extract_dominant(feasible)
        picked = select_versions(dominant, max_versions)
        selected_per_layer.append([sample_to_variant(s) for s in picked])
        dominant_per_layer.append(tuple(sample_to_variant(s) for s in dominant))
        flags_per_layer.append(flags)

    def build_layers(variant_lists: list[list[ImplVariant]]) -> tuple[LayerSpec, ...]:
        return tuple(
            LayerSpec(
                layer_id=rl.layer_id,
                op_count=rl.op_count,
                variants=tuple(vl),
                qos_budget_s=b,
                flags=fl,
            )
            for rl, b, vl, fl in zip(
                raw.layers, budgets, variant_lists, flags_per_layer
            )
        )

    layers = build_layers(selected_per_layer)
    avg0 = average_core_requirement(layers, machine)

    if prune:
        pruned_lists = []
        for layer in layers:
            pruned_lists.append(
                prune_redundant(
                    layer.variants,
                    lambda v, lvl, _l=layer: latency(
                        _l, v, avg0, lvl, machine.total_cores
                    ),
                    INTERFERENCE_GRID,
                )
            )
        layers = build_layers(pruned_lists)

    avg_core = average_core_requirement(layers, machine)
    model_latency_full = sum(
        min(latency(l, v, machine.total_cores, 0.0, machine.total_cores) for v in l.variants)
        for l in layers
    )
    if model_latency_full > qos_s:
        layers = tuple(
            LayerSpec(
                l.layer_id,
                l.op_count,
                l.variants,
                l.qos_budget_s,
                l.flags + (FLAG_QOS_INFEASIBLE_MODEL,),
            )
            for l in layers
        )

    spec = ModelSpec(raw.model_id, layers, qos_s, avg_core)
    issues = validate_model(spec)
    if issues:
        raise AssertionError(f"compiled model violates invariants: {issues}")
    return CompiledModel(spec=spec, dominant=tuple(dominant_per_layer))


def compile_universe(
    machine: MachineSpec,
    raw_models: Sequence[RawModel],
    max_versions: int = DEFAULT_MAX_VERSIONS,
    qos_overrides: dict[str, float] | None = None,
    prune: bool = True,
) -> list[CompiledModel]:
    overrides = qos_overrides or {}
    return [
        compile_model(
            raw,
            machine,
            max_versions,
            qos_override_s=overrides.get(raw.model_id),
            prune=prune,
        )
        for raw in raw_models
    ]
