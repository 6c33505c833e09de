"""Ground-truth performance physics for the simulator.

Latency model: ``op_count / (solo_flops * speedup(cores)) * slowdown(I)``
with Amdahl scaling and a linear interference slowdown capped at 7x.
Interference pressure I is a normalized [0, 1] scalar driven by the
bandwidth emitted by all active layer blocks.  The "ten interference
levels" used throughout map to the uniform grid {0.1, ..., 1.0}.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .domain import ImplVariant, LayerSpec

__all__ = [
    "MachineSpec",
    "CounterSnapshot",
    "ActiveBlock",
    "SLOWDOWN_CAP",
    "INTERFERENCE_GRID",
    "speedup",
    "slowdown",
    "latency",
    "min_core_requirement",
    "pressure",
    "simulate_counters",
]

# Maximum interference-induced slowdown; slowdowns saturate here.
SLOWDOWN_CAP = 7.0

# The ten interference levels used for version selection and pruning.
INTERFERENCE_GRID = tuple((i + 1) / 10 for i in range(10))


@dataclass(frozen=True)
class MachineSpec:
    """The simulated machine: a many-core CPU with a shared L3."""

    total_cores: int = 64
    l3_capacity_bytes: int = 256 * 1024 * 1024
    peak_flops_per_core: float = 3.2e10

    def __post_init__(self) -> None:
        if self.total_cores < 1:
            raise ValueError(f"total_cores must be >= 1, got {self.total_cores}")
        if self.l3_capacity_bytes <= 0:
            raise ValueError("l3_capacity_bytes must be positive")
        if not self.peak_flops_per_core > 0:
            raise ValueError("peak_flops_per_core must be positive")

    def to_dict(self) -> dict:
        return {
            "total_cores": self.total_cores,
            "l3_capacity_bytes": self.l3_capacity_bytes,
            "peak_flops_per_core": self.peak_flops_per_core,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MachineSpec":
        return cls(
            total_cores=d["total_cores"],
            l3_capacity_bytes=d["l3_capacity_bytes"],
            peak_flops_per_core=d["peak_flops_per_core"],
        )


@dataclass(frozen=True)
class CounterSnapshot:
    """Simulated L3 counters at one instant."""

    l3_access_rate: float  # normalized accesses/s
    l3_miss_rate: float  # fraction in [0, 1]
    timestamp_s: float = 0.0

    def __post_init__(self) -> None:
        if not 0.0 <= self.l3_miss_rate <= 1.0:
            raise ValueError(f"l3_miss_rate must be in [0, 1], got {self.l3_miss_rate}")

    def to_dict(self) -> dict:
        return {
            "l3_access_rate": self.l3_access_rate,
            "l3_miss_rate": self.l3_miss_rate,
            "timestamp_s": self.timestamp_s,
        }


@dataclass(frozen=True)
class ActiveBlock:
    """What the shared-resource model needs to know about a running block.

    ``bandwidth_factor`` and ``footprint_units`` are duration-weighted
    means over the block's member layers (a block runs its layers
    sequentially on the same cores).
    """

    cores: int
    bandwidth_factor: float
    footprint_units: float  # block-size units, scaled to bytes below

    def __post_init__(self) -> None:
        if self.cores < 1:
            raise ValueError(f"cores must be >= 1, got {self.cores}")


# Bytes of L3 working set per block-size unit per core.
FOOTPRINT_BYTES_PER_UNIT = 4096

# Miss-rate curve: floor at light load, saturating toward the ceiling.
_MISS_FLOOR = 0.05
_MISS_SPAN = 0.90


def speedup(variant: ImplVariant, cores: int, total_cores: int = 64) -> float:
    """Amdahl speedup at ``cores``: cores / (1 + serial_fraction*(cores-1)).

    Equals 1.0 at one core, non-decreasing and concave in cores.
    """
    if not 1 <= cores <= total_cores:
        raise ValueError(f"cores must be in [1, {total_cores}], got {cores}")
    sf = variant.serial_fraction
    return cores / (1.0 + sf * (cores - 1))


def slowdown(variant: ImplVariant, interference: float) -> float:
    """Linear interference slowdown 1 + sensitivity*I, capped at 7.0."""
    if not 0.0 <= interference <= 1.0:
        raise ValueError(f"interference must be in [0, 1], got {interference}")
    return min(1.0 + variant.interference_sensitivity * interference, SLOWDOWN_CAP)


def latency(
    layer: LayerSpec,
    variant: ImplVariant,
    cores: int,
    interference: float,
    total_cores: int = 64,
) -> float:
    """Seconds to run ``layer`` with ``variant`` on ``cores`` under I."""
    base = layer.op_count / (variant.solo_flops * speedup(variant, cores, total_cores))
    return base * slowdown(variant, interference)


def min_core_requirement(
    layer: LayerSpec,
    variant: ImplVariant,
    interference: float,
    total_cores: int = 64,
    budget_s: float | None = None,
) -> int:
    """Smallest core count meeting the layer's QoS budget at I.

    Returns ``total_cores + 1`` as a sentinel when no core count within
    the machine satisfies the budget (callers clamp).  ``budget_s``
    overrides the layer's own apportioned budget when given.
    """
    budget = layer.qos_budget_s if budget_s is None else budget_s
    if not budget > 0:
        raise ValueError("qos budget must be set and positive")
    # Need speedup(c) >= A;  speedup is capped at 1/serial_fraction.
    base_1core = layer.op_count / variant.solo_flops
    need = base_1core * slowdown(variant, interference) / budget
    if need <= 1.0:
        return 1
    sf = variant.serial_fraction
    if need * sf >= 1.0:
        return total_cores + 1
    cores = math.ceil(need * (1.0 - sf) / (1.0 - need * sf))
    # Closed form can be off by one ulp either way; settle by direct check.
    cores = max(1, min(cores, total_cores + 1))
    while cores <= total_cores and latency(layer, variant, cores, interference, total_cores) > budget:
        cores += 1
    while cores > 1 and latency(layer, variant, cores - 1, interference, total_cores) <= budget:
        cores -= 1
    if cores > total_cores:
        return total_cores + 1
    return cores


def pressure(active: list[ActiveBlock], machine: MachineSpec) -> float:
    """Interference pressure in [0, 1] generated by the active blocks."""
    total = sum(b.cores for b in active)
    if total > machine.total_cores:
        raise ValueError(
            f"active blocks use {total} cores, machine has {machine.total_cores}"
        )
    raw = sum(b.bandwidth_factor * b.cores for b in active) / machine.total_cores
    return min(1.0, raw)


def simulate_counters(
    active: list[ActiveBlock],
    machine: MachineSpec,
    timestamp_s: float = 0.0,
    noise: tuple[float, float] = (0.0, 0.0),
) -> CounterSnapshot:
    """Simulated L3 counters for the active set.

    ``noise`` carries the (access, miss) relative measurement errors,
    each expected in [-0.02, 0.02]; callers draw them from a seeded
    stream so the whole pipeline stays deterministic.
    """
    if not active:
        return CounterSnapshot(0.0, 0.0, timestamp_s)
    access = sum(b.bandwidth_factor * b.cores for b in active)
    footprint = sum(b.footprint_units * b.cores for b in active) * FOOTPRINT_BYTES_PER_UNIT
    load = footprint / machine.l3_capacity_bytes
    miss = _MISS_FLOOR + _MISS_SPAN * (1.0 - math.exp(-load))
    access *= 1.0 + noise[0]
    miss = min(1.0, max(0.0, miss * (1.0 + noise[1])))
    return CounterSnapshot(access, miss, timestamp_s)
