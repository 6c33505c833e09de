"""Synthetic stand-in for the tensor-compiler auto-scheduler.

Generates per-layer implementation samples in the parallelism-locality
plane with predicted latencies.  Samples are points in metric space
only; no schedule legality is modeled.  The shipped 7-model universe is
built here so generated profiles are inspectable and pinnable.
"""

from __future__ import annotations

import math
from bisect import bisect_right
from dataclasses import dataclass, field, replace

import numpy as np

from .domain import ImplVariant, LayerSpec, ModelSpec
from .perfmodel import MachineSpec

__all__ = [
    "GeneratorConfig",
    "ScheduleSample",
    "ModelTemplate",
    "DEFAULT_CATALOG",
    "generate_samples",
    "sample_to_variant",
    "build_universe",
    "RawLayer",
    "RawModel",
]


@dataclass(frozen=True)
class GeneratorConfig:
    """Knobs of the synthetic sample generator.

    Schedules live under an iteration-space budget: block_size *
    parallelism cannot exceed the layer's parallel work, so the search
    trades locality against parallelism and the dominant frontier spans
    the whole plane.  ``kappa`` scales interference sensitivity so the
    largest-block variant of a layer reaches the 7x slowdown cap at
    full pressure.  ``peak_flops`` anchors the solo-time model at the
    reference core count.  How many Pareto levels a layer exhibits is
    not fixed; the sampling ranges control it.
    """

    peak_flops: float = 1.024e12
    reference_cores: int = 64
    kappa: float = 6.0
    noise_max: float = 0.15
    locality_span: float = 1.0
    locality_rate: float = 6.0
    serial_fraction_min: float = 0.004
    parallel_cap_scale: float = 1.0
    bandwidth_min: float = 0.25
    bandwidth_max: float = 0.45
    block_size_choices: tuple[int, ...] = (512, 1024, 2048, 4096)
    parallelism_choices: tuple[int, ...] = (64, 128, 256)
    space_factor_choices: tuple[int, ...] = (3, 4, 6, 8)

    def to_dict(self) -> dict:
        return {
            "peak_flops": self.peak_flops,
            "reference_cores": self.reference_cores,
            "kappa": self.kappa,
            "noise_max": self.noise_max,
            "locality_span": self.locality_span,
            "locality_rate": self.locality_rate,
            "serial_fraction_min": self.serial_fraction_min,
            "parallel_cap_scale": self.parallel_cap_scale,
            "bandwidth_min": self.bandwidth_min,
            "bandwidth_max": self.bandwidth_max,
            "block_size_choices": list(self.block_size_choices),
            "parallelism_choices": list(self.parallelism_choices),
            "space_factor_choices": list(self.space_factor_choices),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorConfig":
        d = dict(d)
        for key in ("block_size_choices", "parallelism_choices", "space_factor_choices"):
            d[key] = tuple(d[key])
        return cls(**d)


@dataclass(frozen=True)
class ScheduleSample:
    """One auto-scheduler trial: a point in the search space plus the
    performance parameters derived for it."""

    block_size: int
    parallelism: int
    solo_time_s: float  # latency at the reference core count, zero interference
    solo_flops: float
    serial_fraction: float
    interference_sensitivity: float
    bandwidth_factor: float

    def to_dict(self) -> dict:
        return {
            "block_size": self.block_size,
            "parallelism": self.parallelism,
            "solo_time_s": self.solo_time_s,
            "solo_flops": self.solo_flops,
            "serial_fraction": self.serial_fraction,
            "interference_sensitivity": self.interference_sensitivity,
            "bandwidth_factor": self.bandwidth_factor,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ScheduleSample":
        return cls(**d)


def sample_to_variant(sample: ScheduleSample) -> ImplVariant:
    """Wrap a sample's derived parameters into an ImplVariant."""
    return ImplVariant(
        variant_id=f"bs{sample.block_size}p{sample.parallelism}",
        block_size=sample.block_size,
        parallelism=sample.parallelism,
        solo_flops=sample.solo_flops,
        serial_fraction=sample.serial_fraction,
        interference_sensitivity=sample.interference_sensitivity,
        bandwidth_factor=sample.bandwidth_factor,
    )


def _amdahl(serial_fraction: float, cores: int) -> float:
    return cores / (1.0 + serial_fraction * (cores - 1))


def _longest_dominance_chain(points: list[tuple[int, int]]) -> int:
    """Length of the longest chain under weak dominance on both axes.

    Sorting by (block_size, parallelism) reduces the problem to the
    longest non-decreasing subsequence of the parallelism values.
    """
    tails: list[int] = []
    for _, p in sorted(points):
        idx = bisect_right(tails, p)
        if idx == len(tails):
            tails.append(p)
        else:
            tails[idx] = p
    return len(tails)


def generate_samples(
    layer_shape_seed: int,
    op_count: float,
    n_samples: int,
    rng_seed: int,
    config: GeneratorConfig | None = None,
    efficiency: float = 1.0,
) -> list[ScheduleSample]:
    """Emulate an auto-scheduler search pass over one layer.

    Returns exactly ``n_samples`` samples, unique in
    (block_size, parallelism) and deterministic in all inputs.  When
    ``n_samples`` >= 32 the point set is guaranteed to span at least
    three Pareto levels so version selection has material to work with.
    ``efficiency`` scales the achievable throughput of this layer
    (below 1.0 for layers that are intrinsically hard to optimize).

    Raises:
        ValueError: if n_samples < 1 ("empty search").
    """
    if n_samples < 1:
        raise ValueError("empty search: n_samples must be >= 1")
    if not op_count > 0:
        raise ValueError(f"op_count must be positive, got {op_count}")
    cfg = config or GeneratorConfig()

    shape_rng = np.random.default_rng(np.random.SeedSequence((layer_shape_seed,)))
    bs_hi = int(shape_rng.choice(np.asarray(cfg.block_size_choices)))
    p_hi = int(shape_rng.choice(np.asarray(cfg.parallelism_choices)))
    space_factor = int(shape_rng.choice(np.asarray(cfg.space_factor_choices)))
    # Iteration-space budget: a schedule cannot tile and parallelize
    # more work than the layer has.
    space = bs_hi * p_hi // space_factor

    rng = np.random.default_rng(np.random.SeedSequence((rng_seed, layer_shape_seed)))
    points: list[tuple[int, int]] = []
    seen: set[tuple[int, int]] = set()
    while len(points) < n_samples:
        draw = n_samples - len(points)
        bs_logs = rng.uniform(0.0, math.log(bs_hi), size=draw)
        p_fracs = rng.uniform(size=draw)
        for bs_log, p_frac in zip(bs_logs, p_fracs):
            bs = max(1, round(math.exp(bs_log)))
            p_cap = max(1, min(p_hi, space // bs))
            p = max(1, round(math.exp(p_frac * math.log(p_cap))))
            pt = (bs, p)
            if pt not in seen:
                seen.add(pt)
                points.append(pt)

    if n_samples >= 32 and _longest_dominance_chain(points) < 3:
        points = _force_three_levels(points, seen, bs_hi, p_hi)

    noises = rng.uniform(0.0, cfg.noise_max, size=len(points))
    max_bs = max(bs for bs, _ in points)
    samples = [
        _derive_sample(bs, p, float(noise), max_bs, bs_hi, p_hi, op_count, efficiency, cfg)
        for (bs, p), noise in zip(points, noises)
    ]
    return samples


def _force_three_levels(
    points: list[tuple[int, int]],
    seen: set[tuple[int, int]],
    bs_hi: int,
    p_hi: int,
) -> list[tuple[int, int]]:
    # Vanishingly unlikely for real sampling ranges, but the contract
    # guarantees three Pareto levels: splice in a strict 3-chain.  A
    # chain point already present would itself contribute to a chain,
    # so all three are fresh whenever this runs.
    base_bs = max(1, bs_hi // 4)
    base_p = max(1, p_hi // 4)
    chain = [(base_bs + i, base_p + i) for i in range(3)]
    fresh = [c for c in chain if c not in seen]
    replaced = list(points)
    if fresh:
        replaced[-len(fresh):] = fresh
    return replaced


def _derive_sample(
    block_size: int,
    parallelism: int,
    noise: float,
    max_bs: int,
    bs_hi: int,
    p_hi: int,
    op_count: float,
    efficiency: float,
    cfg: GeneratorConfig,
) -> ScheduleSample:
    # Locality pays off solo: concave saturating gain in block size.
    gain = 1.0 + cfg.locality_span * (1.0 - math.exp(-cfg.locality_rate * block_size / bs_hi))
    solo_time = op_count / (cfg.peak_flops * efficiency * gain * (1.0 - noise))

    # Scaling loss shrinks with parallel width: Amdahl speedup then
    # saturates near parallel_cap_scale * parallelism.
    sf = cfg.serial_fraction_min + 1.0 / (cfg.parallel_cap_scale * parallelism)
    sf = min(1.0, sf)

    bs_norm = block_size / max_bs
    sensitivity = cfg.kappa * bs_norm
    bandwidth = cfg.bandwidth_max - (cfg.bandwidth_max - cfg.bandwidth_min) * bs_norm

    # 1-core throughput consistent with the reference-core solo time.
    solo_flops = op_count / (solo_time * _amdahl(sf, cfg.reference_cores))
    return ScheduleSample(
        block_size=block_size,
        parallelism=parallelism,
        solo_time_s=solo_time,
        solo_flops=solo_flops,
        serial_fraction=sf,
        interference_sensitivity=sensitivity,
        bandwidth_factor=bandwidth,
    )


# ---------------------------------------------------------------------------
# Shipped model universe
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ModelTemplate:
    """Shape of one synthetic model in the shipped universe.

    ``spike_positions`` mark intrinsically hard, conflict-prone layers
    (low achievable efficiency, hence a core requirement well above the
    model average).  Non-spike efficiency varies smoothly along the
    layer index so neighboring layers have similar core preferences.
    """

    model_id: str
    qos_s: float
    n_layers: int
    total_gflop: float
    spike_positions: tuple[int, ...] = ()
    spike_efficiency: float = 0.45
    spike_op_scale: float = 0.35
    model_seed: int = 0

    def to_dict(self) -> dict:
        return {
            "model_id": self.model_id,
            "qos_s": self.qos_s,
            "n_layers": self.n_layers,
            "total_gflop": self.total_gflop,
            "spike_positions": list(self.spike_positions),
            "spike_efficiency": self.spike_efficiency,
            "spike_op_scale": self.spike_op_scale,
            "model_seed": self.model_seed,
        }


# QoS values follow the MLPerf-server style targets used throughout the
# evaluation: 15 ms for the medium vision models, 10 ms for the light
# ones, 100/130 ms for the heavy detection/NMT models.
DEFAULT_CATALOG: tuple[ModelTemplate, ...] = (
    ModelTemplate("resnet50", 0.015, 55, 6.5, (8, 14, 27, 41, 48), model_seed=1),
    ModelTemplate("googlenet", 0.015, 58, 4.3, (12, 25, 35, 47), model_seed=2),
    ModelTemplate("efficientnet", 0.010, 40, 1.7, (10, 20, 30), model_seed=3),
    ModelTemplate("mobilenet_v2", 0.010, 35, 1.5, (9, 17, 26), model_seed=4),
    ModelTemplate("ssd", 0.100, 60, 44.8, (8, 15, 30, 45, 52), model_seed=5),
    ModelTemplate("tiny_yolov2", 0.010, 9, 1.7, (4,), model_seed=6),
    ModelTemplate("bert_large", 0.130, 48, 86.0, (6, 12, 24, 36, 42), model_seed=7),
)


@dataclass(frozen=True)
class RawLayer:
    """Pre-compilation layer: op count plus its search samples."""

    layer_id: int
    op_count: float
    efficiency: float
    samples: tuple[ScheduleSample, ...]

    def to_dict(self) -> dict:
        return {
            "layer_id": self.layer_id,
            "op_count": self.op_count,
            "efficiency": self.efficiency,
            "samples": [s.to_dict() for s in self.samples],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RawLayer":
        return cls(
            layer_id=d["layer_id"],
            op_count=d["op_count"],
            efficiency=d["efficiency"],
            samples=tuple(ScheduleSample.from_dict(s) for s in d["samples"]),
        )


@dataclass(frozen=True)
class RawModel:
    model_id: str
    qos_s: float
    layers: tuple[RawLayer, ...]

    def to_dict(self) -> dict:
        return {
            "model_id": self.model_id,
            "qos_s": self.qos_s,
            "layers": [l.to_dict() for l in self.layers],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RawModel":
        return cls(
            model_id=d["model_id"],
            qos_s=d["qos_s"],
            layers=tuple(RawLayer.from_dict(l) for l in d["layers"]),
        )


def _layer_profile(template: ModelTemplate, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Per-layer op counts and efficiencies for one model.

    Op weights are smoothed so budgets vary gently.  Efficiency sweeps
    slowly along the depth (neighboring layers have similar core
    preferences, while the model as a whole spans a wide range) with
    deep notches at the conflict-prone spike positions.
    """
    n = template.n_layers
    w = rng.uniform(0.6, 1.4, size=n)
    kernel = np.ones(3) / 3.0
    w = np.convolve(np.pad(w, 1, mode="edge"), kernel, mode="valid")
    # Conflict-prone layers are short but hard: little work, deep
    # efficiency notch, so their core requirement spikes while their
    # time share stays small.
    for pos in template.spike_positions:
        w[pos] *= template.spike_op_scale
    ops = w / w.sum() * template.total_gflop * 1e9

    cycles = float(rng.choice(np.asarray([0.5, 1.0, 1.5])))
    phase = float(rng.uniform(0.0, 2.0 * np.pi))
    x = np.arange(n) / max(1, n - 1)
    eff = 0.92 + 0.42 * np.sin(2.0 * np.pi * cycles * x + phase)
    eff += rng.uniform(-0.03, 0.03, size=n)
    eff = np.clip(eff, 0.45, 1.35)
    for pos in template.spike_positions:
        eff[pos] = template.spike_efficiency
    return ops, eff


def build_universe(
    seed: int = 20240101,
    n_samples: int = 256,
    config: GeneratorConfig | None = None,
    machine: MachineSpec | None = None,
    catalog: tuple[ModelTemplate, ...] = DEFAULT_CATALOG,
) -> tuple[MachineSpec, list[RawModel]]:
    """Generate the shipped multi-model sample universe."""
    cfg = config or GeneratorConfig()
    mach = machine or MachineSpec()
    models = []
    for template in catalog:
        rng = np.random.default_rng(np.random.SeedSequence((seed, template.model_seed)))
        ops, eff = _layer_profile(template, rng)
        layers = []
        for i in range(template.n_layers):
            shape_seed = template.model_seed * 1000 + i
            samples = generate_samples(
                layer_shape_seed=shape_seed,
                op_count=float(ops[i]),
                n_samples=n_samples,
                rng_seed=seed,
                config=cfg,
                efficiency=float(eff[i]),
            )
            layers.append(
                RawLayer(
                    layer_id=i,
                    op_count=float(ops[i]),
                    efficiency=float(eff[i]),
                    samples=tuple(samples),
                )
            )
        models.append(RawModel(template.model_id, template.qos_s, tuple(layers)))
    return mach, models
