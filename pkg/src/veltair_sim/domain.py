"""Core value types shared by every other module.

All types are immutable after construction and safe to share across
threads.  Constructors enforce per-field invariants (raising
``ValueError``); cross-object consistency checks live in
:func:`validate_model`, which reports findings instead of raising.

Time convention: the simulation engine works in integer nanoseconds for
exact event ordering; every file format and every dataclass field named
``*_s`` uses decimal seconds.  ``seconds_to_ns`` / ``ns_to_seconds``
round-trip exactly for the durations this project deals with.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

__all__ = [
    "ImplVariant",
    "LayerSpec",
    "ModelSpec",
    "LayerBlock",
    "BlockTrace",
    "Query",
    "seconds_to_ns",
    "ns_to_seconds",
    "validate_model",
]


def seconds_to_ns(t: float) -> int:
    """Convert decimal seconds to integer nanoseconds (nearest)."""
    return round(t * 1e9)


def ns_to_seconds(t: int) -> float:
    """Convert integer nanoseconds back to decimal seconds."""
    return t / 1e9


@dataclass(frozen=True)
class ImplVariant:
    """One compiled version of a layer.

    Attributes:
        variant_id: opaque identifier, unique within the layer.
        block_size: tile-element count; dimensionless locality metric
            (only its ordering matters to the algorithms).
        parallelism: product of unroll factor and parallelization
            factor, dimensionless.
        solo_flops: effective floating-point throughput at 1 core with
            zero interference, FLOP/s.
        serial_fraction: Amdahl-style scaling loss in [0, 1].
        interference_sensitivity: slope of slowdown vs interference.
        bandwidth_factor: shared-resource pressure emitted per active
            core, normalized units.
    """

    variant_id: str
    block_size: int
    parallelism: int
    solo_flops: float
    serial_fraction: float
    interference_sensitivity: float
    bandwidth_factor: float

    def __post_init__(self) -> None:
        if self.block_size < 1:
            raise ValueError(f"block_size must be >= 1, got {self.block_size}")
        if self.parallelism < 1:
            raise ValueError(f"parallelism must be >= 1, got {self.parallelism}")
        if not self.solo_flops > 0:
            raise ValueError(f"solo_flops must be positive, got {self.solo_flops}")
        if not 0.0 <= self.serial_fraction <= 1.0:
            raise ValueError(
                f"serial_fraction must be in [0, 1], got {self.serial_fraction}"
            )
        if self.interference_sensitivity < 0:
            raise ValueError(
                "interference_sensitivity must be non-negative, got "
                f"{self.interference_sensitivity}"
            )
        if not self.bandwidth_factor > 0:
            raise ValueError(
                f"bandwidth_factor must be positive, got {self.bandwidth_factor}"
            )

    def to_dict(self) -> dict:
        return {
            "variant_id": self.variant_id,
            "block_size": self.block_size,
            "parallelism": self.parallelism,
            "solo_flops": self.solo_flops,
            "serial_fraction": self.serial_fraction,
            "interference_sensitivity": self.interference_sensitivity,
            "bandwidth_factor": self.bandwidth_factor,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ImplVariant":
        return cls(
            variant_id=d["variant_id"],
            block_size=d["block_size"],
            parallelism=d["parallelism"],
            solo_flops=d["solo_flops"],
            serial_fraction=d["serial_fraction"],
            interference_sensitivity=d["interference_sensitivity"],
            bandwidth_factor=d["bandwidth_factor"],
        )


@dataclass(frozen=True)
class LayerSpec:
    """A layer's operation count and compiled variant set.

    ``qos_budget_s`` is the layer's share of the model deadline,
    apportioned proportionally to ``op_count``; 0.0 until apportioned.
    ``variants`` is sorted ascending by block_size once compiled.
    """

    layer_id: int
    op_count: float  # FLOP
    variants: tuple[ImplVariant, ...] = ()
    qos_budget_s: float = 0.0
    flags: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if self.layer_id < 0:
            raise ValueError(f"layer_id must be >= 0, got {self.layer_id}")
        if not self.op_count > 0:
            raise ValueError(f"op_count must be positive, got {self.op_count}")
        if not isinstance(self.variants, tuple):
            object.__setattr__(self, "variants", tuple(self.variants))
        if not isinstance(self.flags, tuple):
            object.__setattr__(self, "flags", tuple(self.flags))

    def with_budget(self, budget_s: float) -> "LayerSpec":
        return replace(self, qos_budget_s=budget_s)

    def to_dict(self) -> dict:
        return {
            "layer_id": self.layer_id,
            "op_count": self.op_count,
            "qos_budget_s": self.qos_budget_s,
            "flags": list(self.flags),
            "variants": [v.to_dict() for v in self.variants],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        return cls(
            layer_id=d["layer_id"],
            op_count=d["op_count"],
            qos_budget_s=d["qos_budget_s"],
            flags=tuple(d.get("flags", ())),
            variants=tuple(ImplVariant.from_dict(v) for v in d["variants"]),
        )


@dataclass(frozen=True)
class ModelSpec:
    """An ordered layer list with an end-to-end QoS deadline.

    ``avg_core`` is the model-granularity core requirement: the
    smallest core count at which the whole model meets its deadline
    with per-layer best variants and no interference.  0 until the
    model is compiled.
    """

    model_id: str
    layers: tuple[LayerSpec, ...]
    qos_s: float
    avg_core: int = 0

    def __post_init__(self) -> None:
        if not self.model_id:
            raise ValueError("model_id must be non-empty")
        if not self.qos_s > 0:
            raise ValueError(f"qos_s must be positive, got {self.qos_s}")
        if self.avg_core < 0:
            raise ValueError(f"avg_core must be >= 0, got {self.avg_core}")
        if not isinstance(self.layers, tuple):
            object.__setattr__(self, "layers", tuple(self.layers))
        if not self.layers:
            raise ValueError("model must have at least one layer")

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    def to_dict(self) -> dict:
        return {
            "model_id": self.model_id,
            "qos_s": self.qos_s,
            "avg_core": self.avg_core,
            "layers": [l.to_dict() for l in self.layers],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(
            model_id=d["model_id"],
            qos_s=d["qos_s"],
            avg_core=d.get("avg_core", 0),
            layers=tuple(LayerSpec.from_dict(l) for l in d["layers"]),
        )


@dataclass(frozen=True)
class LayerBlock:
    """A contiguous layer range scheduled as one unit.

    ``layer_range`` is a half-open index interval [begin, end) into the
    model's layer list.  ``overflow`` marks blocks whose core
    requirement had to be clamped below what the QoS budget needs.
    """

    model_ref: str
    layer_range: tuple[int, int]
    core_alloc: int
    block_qos_s: float
    chosen_variant_per_layer: tuple[str, ...]
    overflow: bool = False

    def __post_init__(self) -> None:
        begin, end = self.layer_range
        if not 0 <= begin < end:
            raise ValueError(f"layer_range must satisfy 0 <= begin < end, got {self.layer_range}")
        if self.core_alloc < 1:
            raise ValueError(f"core_alloc must be >= 1, got {self.core_alloc}")
        if not self.block_qos_s > 0:
            raise ValueError(f"block_qos_s must be positive, got {self.block_qos_s}")
        if len(self.chosen_variant_per_layer) != end - begin:
            raise ValueError(
                "chosen_variant_per_layer must have one entry per layer in range"
            )
        if not isinstance(self.chosen_variant_per_layer, tuple):
            object.__setattr__(
                self, "chosen_variant_per_layer", tuple(self.chosen_variant_per_layer)
            )

    @property
    def num_layers(self) -> int:
        return self.layer_range[1] - self.layer_range[0]

    def to_dict(self) -> dict:
        return {
            "model_ref": self.model_ref,
            "layer_range": list(self.layer_range),
            "core_alloc": self.core_alloc,
            "block_qos_s": self.block_qos_s,
            "chosen_variant_per_layer": list(self.chosen_variant_per_layer),
            "overflow": self.overflow,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LayerBlock":
        return cls(
            model_ref=d["model_ref"],
            layer_range=tuple(d["layer_range"]),
            core_alloc=d["core_alloc"],
            block_qos_s=d["block_qos_s"],
            chosen_variant_per_layer=tuple(d["chosen_variant_per_layer"]),
            overflow=d.get("overflow", False),
        )


@dataclass(frozen=True)
class BlockTrace:
    """Execution record of one layer block within a query.

    A block runs its layers sequentially on the cores it holds; a
    conflicted block starts on fewer cores than requested and grows
    toward the request at layer boundaries as cores free up, so each
    layer records the core count and ground-truth pressure it actually
    ran under.  ``interference_at_start`` is the pressure at the first
    layer; ``interference_predicted`` is what the runtime proxy
    reported to the scheduler (ground truth for strategies that do not
    use the proxy).  ``cores`` is the count held when the block ended.
    """

    block: LayerBlock
    start_s: float
    end_s: float
    cores: int
    interference_at_start: float
    interference_predicted: float
    cores_per_layer: tuple[int, ...] = ()
    interference_per_layer: tuple[float, ...] = ()
    conflicted: bool = False
    overhead_s: float = 0.0

    def __post_init__(self) -> None:
        if not isinstance(self.cores_per_layer, tuple):
            object.__setattr__(self, "cores_per_layer", tuple(self.cores_per_layer))
        if not isinstance(self.interference_per_layer, tuple):
            object.__setattr__(
                self, "interference_per_layer", tuple(self.interference_per_layer)
            )

    def to_dict(self) -> dict:
        return {
            "block": self.block.to_dict(),
            "start_s": self.start_s,
            "end_s": self.end_s,
            "cores": self.cores,
            "interference_at_start": self.interference_at_start,
            "interference_predicted": self.interference_predicted,
            "cores_per_layer": list(self.cores_per_layer),
            "interference_per_layer": list(self.interference_per_layer),
            "conflicted": self.conflicted,
            "overhead_s": self.overhead_s,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BlockTrace":
        return cls(
            block=LayerBlock.from_dict(d["block"]),
            start_s=d["start_s"],
            end_s=d["end_s"],
            cores=d["cores"],
            interference_at_start=d["interference_at_start"],
            interference_predicted=d["interference_predicted"],
            cores_per_layer=tuple(d.get("cores_per_layer", ())),
            interference_per_layer=tuple(d.get("interference_per_layer", ())),
            conflicted=d.get("conflicted", False),
            overhead_s=d.get("overhead_s", 0.0),
        )


@dataclass(frozen=True)
class Query:
    """One inference request with its completion record."""

    query_id: str
    model_id: str
    arrival_s: float
    deadline_s: float
    finish_s: float | None = None
    per_block_trace: tuple[BlockTrace, ...] = ()

    def __post_init__(self) -> None:
        if self.deadline_s < self.arrival_s:
            raise ValueError("deadline must not precede arrival")
        if self.finish_s is not None and self.finish_s < self.arrival_s:
            raise ValueError("finish_time must not precede arrival_time")
        if not isinstance(self.per_block_trace, tuple):
            object.__setattr__(self, "per_block_trace", tuple(self.per_block_trace))

    @property
    def latency_s(self) -> float | None:
        if self.finish_s is None:
            return None
        return self.finish_s - self.arrival_s

    @property
    def met_deadline(self) -> bool:
        return self.finish_s is not None and self.finish_s <= self.deadline_s

    def to_dict(self) -> dict:
        return {
            "query_id": self.query_id,
            "model_id": self.model_id,
            "arrival_s": self.arrival_s,
            "deadline_s": self.deadline_s,
            "finish_s": self.finish_s,
            "per_block_trace": [t.to_dict() for t in self.per_block_trace],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Query":
        return cls(
            query_id=d["query_id"],
            model_id=d["model_id"],
            arrival_s=d["arrival_s"],
            deadline_s=d["deadline_s"],
            finish_s=d.get("finish_s"),
            per_block_trace=tuple(
                BlockTrace.from_dict(t) for t in d.get("per_block_trace", ())
            ),
        )


# Relative tolerance for "budgets sum to the model deadline".
_BUDGET_REL_TOL = 1e-9


def validate_model(
    spec: ModelSpec, blocks: list[LayerBlock] | None = None
) -> list[str]:
    """Check cross-object invariants; returns violation descriptions.

    Never raises: an empty list means the model (and, if given, its
    block partition) is consistent.  Pure: repeated calls on the same
    inputs return identical results.
    """
    findings: list[str] = []

    for pos, layer in enumerate(spec.layers):
        if layer.layer_id != pos:
            findings.append(
                f"layer at position {pos} has layer_id {layer.layer_id}"
            )
        bs = [v.block_size for v in layer.variants]
        if bs != sorted(bs):
            findings.append(
                f"layer {layer.layer_id}: variants not sorted by block_size"
            )
        # Sensitivity must increase with block_size within a layer.
        by_bs = sorted(layer.variants, key=lambda v: v.block_size)
        for a, b in zip(by_bs, by_bs[1:]):
            if a.block_size < b.block_size and not (
                a.interference_sensitivity < b.interference_sensitivity
            ):
                findings.append(
                    f"layer {layer.layer_id}: interference_sensitivity not "
                    f"increasing in block_size ({a.variant_id} vs {b.variant_id})"
                )

    budgets = [l.qos_budget_s for l in spec.layers]
    if any(b > 0 for b in budgets):
        if any(b <= 0 for b in budgets):
            findings.append("some layers have qos_budget unset or non-positive")
        total = sum(budgets)
        residual = total - spec.qos_s
        if abs(residual) > _BUDGET_REL_TOL * spec.qos_s:
            findings.append(
                f"layer budgets sum to {total!r}, expected qos {spec.qos_s!r} "
                f"(residual {residual!r})"
            )

    if spec.avg_core:
        if spec.avg_core < 1:
            findings.append(f"avg_core must be >= 1, got {spec.avg_core}")

    if blocks is not None:
        findings.extend(_validate_partition(spec, blocks))

    return findings


def _validate_partition(spec: ModelSpec, blocks: list[LayerBlock]) -> list[str]:
    findings: list[str] = []
    n = spec.num_layers
    ordered = sorted(blocks, key=lambda b: b.layer_range)
    for a, b in zip(ordered, ordered[1:]):
        if b.layer_range[0] < a.layer_range[1]:
            findings.append(
                f"blocks {a.layer_range} and {b.layer_range} overlap"
            )
        elif b.layer_range[0] > a.layer_range[1]:
            findings.append(
                f"gap between blocks {a.layer_range} and {b.layer_range}"
            )
    if ordered:
        if ordered[0].layer_range[0] != 0:
            findings.append(
                f"first block starts at {ordered[0].layer_range[0]}, expected 0"
            )
        if ordered[-1].layer_range[1] != n:
            findings.append(
                f"last block ends at {ordered[-1].layer_range[1]}, expected {n}"
            )
        for blk in ordered:
            begin, end = blk.layer_range
            expected = sum(l.qos_budget_s for l in spec.layers[begin:end])
            if expected > 0 and abs(blk.block_qos_s - expected) > _BUDGET_REL_TOL * expected:
                findings.append(
                    f"block {blk.layer_range}: block_qos {blk.block_qos_s!r} "
                    f"!= sum of member budgets {expected!r}"
                )
    return findings
