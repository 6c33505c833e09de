"""Scheduling strategies: layer-block formation, dynamic thresholds,
version choice, and conflict accounting.

All functions here are pure decision logic over explicit inputs; the
simulation engine owns the mutable state and calls into this module at
event boundaries.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .domain import ImplVariant, LayerBlock, LayerSpec, ModelSpec
from .perfmodel import MachineSpec, latency, min_core_requirement

__all__ = [
    "StrategyKind",
    "SchedulingStrategy",
    "parse_strategy",
    "ConflictModel",
    "BUDGET_MARGIN",
    "planning_budget",
    "dynamic_threshold",
    "choose_variant",
    "static_variant",
    "finding_first_pivot",
    "block_core_requirement",
    "form_layer_blocks",
    "next_block",
    "soon_to_finish",
    "apply_conflict",
]


class StrategyKind(enum.Enum):
    MODEL_WISE_FCFS = "model_wise_fcfs"
    LAYER_WISE = "layer_wise"
    FIXED_BLOCK = "fixed_block"
    VELTAIR_AS = "veltair_as"
    VELTAIR_AC = "veltair_ac"
    VELTAIR_FULL = "veltair_full"


# Core requirements are planned against this fraction of the QoS
# budget, so a block lands safely inside its deadline share even when
# pressure drifts upward during execution or the proxy underestimates.
BUDGET_MARGIN = 0.85


def planning_budget(budget_s: float) -> float:
    """QoS budget the scheduler actually plans against."""
    return BUDGET_MARGIN * budget_s


@dataclass(frozen=True)
class SchedulingStrategy:
    """A strategy kind plus its parameters.

    ``adaptive_variants`` strategies pick code versions by the current
    interference estimate; the rest always run the solo-optimal
    version.  ``adaptive_blocks`` strategies form dynamic-threshold
    layer blocks; the rest use a fixed granularity.
    """

    kind: StrategyKind
    fixed_block_size: int = 0

    def __post_init__(self) -> None:
        if self.kind is StrategyKind.FIXED_BLOCK and self.fixed_block_size < 1:
            raise ValueError("fixed_block strategy needs a block size >= 1")

    @property
    def name(self) -> str:
        if self.kind is StrategyKind.FIXED_BLOCK:
            return f"fixed_block:{self.fixed_block_size}"
        return self.kind.value

    @property
    def adaptive_variants(self) -> bool:
        return self.kind in (StrategyKind.VELTAIR_AC, StrategyKind.VELTAIR_FULL)

    @property
    def adaptive_blocks(self) -> bool:
        return self.kind in (StrategyKind.VELTAIR_AS, StrategyKind.VELTAIR_FULL)

    @property
    def uses_proxy(self) -> bool:
        return self.kind in (
            StrategyKind.VELTAIR_AS,
            StrategyKind.VELTAIR_AC,
            StrategyKind.VELTAIR_FULL,
        )


def parse_strategy(name: str) -> SchedulingStrategy:
    """Parse a CLI strategy name, e.g. "veltair_full" or "fixed_block:6"."""
    text = name.strip().lower().replace("(", ":").rstrip(")")
    if text.startswith("fixed_block"):
        parts = text.split(":")
        if len(parts) != 2 or not parts[1].isdigit():
            raise ValueError(f"bad fixed_block size in strategy {name!r}")
        return SchedulingStrategy(StrategyKind.FIXED_BLOCK, int(parts[1]))
    try:
        return SchedulingStrategy(StrategyKind(text))
    except ValueError:
        valid = ", ".join(k.value for k in StrategyKind)
        raise ValueError(f"unknown strategy {name!r}; expected one of: {valid}")


@dataclass(frozen=True)
class ConflictModel:
    """Cost of a scheduling conflict (thread re-spawn and re-pinning).

    Deterministic mode charges the mean once per conflicted allocation;
    the stochastic mode draws from a lognormal with the measured median
    (and the same mean).
    """

    per_conflict_overhead_s: float = 220e-6
    stochastic: bool = False
    median_s: float = 100e-6

    def __post_init__(self) -> None:
        if self.per_conflict_overhead_s < 0:
            raise ValueError("overhead must be >= 0")
        if self.stochastic and not 0 < self.median_s <= self.per_conflict_overhead_s:
            raise ValueError("stochastic mode needs 0 < median <= mean")

    def draw_overhead_s(self, rng: np.random.Generator | None = None) -> float:
        if not self.stochastic:
            return self.per_conflict_overhead_s
        if rng is None:
            raise ValueError("stochastic conflict model needs an rng")
        sigma = math.sqrt(2.0 * math.log(self.per_conflict_overhead_s / self.median_s))
        return float(rng.lognormal(mean=math.log(self.median_s), sigma=sigma))

    def to_dict(self) -> dict:
        return {
            "per_conflict_overhead_s": self.per_conflict_overhead_s,
            "stochastic": self.stochastic,
            "median_s": self.median_s,
        }


def apply_conflict(
    requested: int,
    available: int,
    model: ConflictModel,
    rng: np.random.Generator | None = None,
) -> tuple[int, float]:
    """Resolve an allocation request against the free-core pool.

    Returns (granted cores, overhead seconds).  A request that fits is
    granted in full with zero overhead; otherwise the block starts on
    everything available and pays the reallocation overhead once (a
    later core upgrade adds no second charge within the same unit).
    """
    if available < 0:
        raise ValueError(f"available cores must be >= 0, got {available}")
    if requested <= available:
        return requested, 0.0
    return available, model.draw_overhead_s(rng)


def dynamic_threshold(avg_cores: Sequence[int], total_cores: int) -> list[int]:
    """Split the idle cores over the active models.

    Idle cores (total minus the sum of model-average requirements) are
    distributed proportionally to each model's average core count,
    floored; leftover cores go one-by-one to models in descending
    average order.  No idle cores (or oversubscription) means all
    zeros, so sum(avg + thres) never exceeds the machine.
    """
    n = len(avg_cores)
    if n == 0:
        return []
    total_avg = sum(avg_cores)
    idle = total_cores - total_avg
    if idle <= 0:
        return [0] * n
    thres = [idle * a // total_avg for a in avg_cores]
    residual = idle - sum(thres)
    for i in sorted(range(n), key=lambda k: (-avg_cores[k], k)):
        if residual <= 0:
            break
        thres[i] += 1
        residual -= 1
    return thres


def choose_variant(
    layer: LayerSpec,
    interference: float,
    cores: int,
    total_cores: int = 64,
) -> ImplVariant:
    """The version with minimal latency at the given operating point.

    Ties break toward the smaller block size (variants are stored in
    ascending block-size order).
    """
    if not layer.variants:
        raise ValueError(f"layer {layer.layer_id} has no compiled variants")
    best = layer.variants[0]
    best_lat = latency(layer, best, cores, interference, total_cores)
    for v in layer.variants[1:]:
        lat = latency(layer, v, cores, interference, total_cores)
        if lat < best_lat:
            best, best_lat = v, lat
    return best


def static_variant(layer: LayerSpec, cores: int, total_cores: int = 64) -> ImplVariant:
    """The interference-oblivious (solo-optimal) version."""
    return choose_variant(layer, 0.0, cores, total_cores)


def finding_first_pivot(
    core_requirements: Sequence[int],
    threshold: int,
    avg_core: int,
) -> int | None:
    """Index of the first conflict-prone layer, or None.

    A layer is conflict-prone when its core requirement reaches
    ``avg_core + threshold``.  The scan starts at index 1: the first
    layer always joins the block that is being formed, so only a later
    layer can split it.
    """
    if threshold < 0 or avg_core < 1:
        raise ValueError("threshold must be >= 0 and avg_core >= 1")
    bar = avg_core + threshold
    for i in range(1, len(core_requirements)):
        if core_requirements[i] >= bar:
            return i
    return None


def block_core_requirement(
    layers: Sequence[LayerSpec],
    variants: Sequence[ImplVariant],
    block_budget_s: float,
    interference: float,
    machine: MachineSpec,
) -> int:
    """Smallest core count at which the block meets its QoS budget.

    Returns ``total_cores + 1`` when no count suffices.
    """

    def block_latency(cores: int) -> float:
        return sum(
            latency(l, v, cores, interference, machine.total_cores)
            for l, v in zip(layers, variants)
        )

    lo, hi = 1, machine.total_cores
    if block_latency(hi) > block_budget_s:
        return machine.total_cores + 1
    while lo < hi:
        mid = (lo + hi) // 2
        if block_latency(mid) <= block_budget_s:
            hi = mid
        else:
            lo = mid + 1
    return lo


def _make_block(
    model: ModelSpec,
    begin: int,
    end: int,
    variants: Sequence[ImplVariant],
    interference: float,
    ceiling: int,
    machine: MachineSpec,
) -> LayerBlock:
    members = model.layers[begin:end]
    budget = sum(l.qos_budget_s for l in members)
    required = block_core_requirement(
        members, variants, planning_budget(budget), interference, machine
    )
    # The fair-share allowance caps the block; overflow marks blocks
    # whose requirement had to be clamped (QoS knowingly sacrificed
    # under load to keep core usage smooth).
    alloc = min(required, ceiling)
    return LayerBlock(
        model_ref=model.model_id,
        layer_range=(begin, end),
        core_alloc=alloc,
        block_qos_s=budget,
        chosen_variant_per_layer=tuple(v.variant_id for v in variants),
        overflow=required > ceiling,
    )


def next_block(
    model: ModelSpec,
    begin: int,
    interference: float,
    threshold: int,
    machine: MachineSpec,
    adaptive_variants: bool = True,
) -> LayerBlock:
    """Form the next layer block starting at ``begin``.

    Versions are chosen at the block's core ceiling for the current
    interference estimate; the block ends just before the next
    conflict-prone layer (or at the model's end).
    """
    n = model.num_layers
    if not 0 <= begin < n:
        raise ValueError(f"begin must be in [0, {n}), got {begin}")
    ceiling = min(machine.total_cores, model.avg_core + threshold)
    eval_i = interference if adaptive_variants else 0.0
    variants = [
        choose_variant(l, eval_i, ceiling, machine.total_cores)
        for l in model.layers[begin:]
    ]
    reqs = [
        min_core_requirement(
            l, v, interference, machine.total_cores,
            budget_s=planning_budget(l.qos_budget_s),
        )
        for l, v in zip(model.layers[begin:], variants)
    ]
    pivot = finding_first_pivot(reqs, threshold, model.avg_core)
    end = n if pivot is None else begin + pivot
    return _make_block(
        model, begin, end, variants[: end - begin], interference, ceiling, machine
    )


def form_layer_blocks(
    model: ModelSpec,
    interference: float,
    threshold: int,
    machine: MachineSpec,
    adaptive_variants: bool = True,
) -> list[LayerBlock]:
    """Partition the whole model into layer blocks at one threshold.

    Every block begins at a conflict-prone layer (except the first) and
    uses at most ``avg_core + threshold`` cores unless overflow-flagged.
    """
    blocks: list[LayerBlock] = []
    begin = 0
    while begin < model.num_layers:
        blk = next_block(model, begin, interference, threshold, machine, adaptive_variants)
        blocks.append(blk)
        begin = blk.layer_range[1]
    return blocks


def soon_to_finish(now_ns: int, start_ns: int, end_ns: int, fraction: float = 0.1) -> bool:
    """True when a running block's remaining time is within ``fraction``
    of its predicted total latency (such blocks are ignored when the
    scheduler estimates interference for the next decision)."""
    total = end_ns - start_ns
    remaining = end_ns - now_ns
    return remaining <= fraction * total
