"""Runtime interference proxy: linear model from L3 counters to pressure.

The proxy is trained offline on a calibration trace and frozen; at
runtime the scheduler evaluates it instead of reading ground truth.
Fitting is ordinary least squares via normal equations with a tiny
ridge (1e-12) for conditioning.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .compiler import CompiledModel
from .perfmodel import ActiveBlock, CounterSnapshot, MachineSpec, pressure, simulate_counters

__all__ = [
    "LinearProxy",
    "fit",
    "predict",
    "r_squared",
    "mean_absolute_error",
    "calibration_trace",
    "calibrate",
]

_RIDGE = 1e-12
COUNTER_NOISE_MAX = 0.02


@dataclass(frozen=True)
class LinearProxy:
    """Fitted interference model: I ~ a0 + a1*miss_rate + a2*access."""

    a0: float
    a1: float
    a2: float
    r2: float

    def to_dict(self) -> dict:
        return {"a0": self.a0, "a1": self.a1, "a2": self.a2, "r2": self.r2}

    @classmethod
    def from_dict(cls, d: dict) -> "LinearProxy":
        return cls(a0=d["a0"], a1=d["a1"], a2=d["a2"], r2=d["r2"])


def predict(proxy: LinearProxy, snapshot: CounterSnapshot) -> float:
    """Predicted interference pressure, clamped to [0, 1]."""
    raw = proxy.a0 + proxy.a1 * snapshot.l3_miss_rate + proxy.a2 * snapshot.l3_access_rate
    return min(1.0, max(0.0, raw))


def fit(observations: Sequence[tuple[CounterSnapshot, float]]) -> LinearProxy:
    """Least-squares fit of pressure against (miss rate, access rate).

    Requires at least 3 observations spanning a full-rank design;
    raises ValueError("rank-deficient") otherwise.  The recorded r2 is
    computed on the training set from clamped predictions.
    """
    if len(observations) < 3:
        raise ValueError(f"need >= 3 observations, got {len(observations)}")
    x = np.array(
        [[1.0, snap.l3_miss_rate, snap.l3_access_rate] for snap, _ in observations]
    )
    y = np.array([true_i for _, true_i in observations])
    if np.linalg.matrix_rank(x) < 3:
        raise ValueError("rank-deficient design matrix")
    xtx = x.T @ x + _RIDGE * np.eye(3)
    coeffs = np.linalg.solve(xtx, x.T @ y)
    proxy = LinearProxy(a0=float(coeffs[0]), a1=float(coeffs[1]), a2=float(coeffs[2]), r2=0.0)
    r2 = r_squared(proxy, observations)
    return LinearProxy(proxy.a0, proxy.a1, proxy.a2, r2)


def r_squared(
    proxy: LinearProxy, observations: Sequence[tuple[CounterSnapshot, float]]
) -> float:
    preds = np.array([predict(proxy, snap) for snap, _ in observations])
    y = np.array([true_i for _, true_i in observations])
    ss_res = float(np.sum((y - preds) ** 2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    if ss_tot == 0.0:
        return 1.0 if ss_res == 0.0 else 0.0
    return min(1.0, max(0.0, 1.0 - ss_res / ss_tot))


def mean_absolute_error(
    proxy: LinearProxy, observations: Sequence[tuple[CounterSnapshot, float]]
) -> float:
    errs = [abs(predict(proxy, snap) - true_i) for snap, true_i in observations]
    return sum(errs) / len(errs)


def calibration_trace(
    universe: Sequence[CompiledModel],
    machine: MachineSpec,
    n_snapshots: int,
    seed: int,
) -> list[tuple[CounterSnapshot, float]]:
    """Simulated calibration run: random co-location states drawn from
    the compiled universe, observed through noisy counters."""
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0xCA11)))
    layer_pool = [
        (layer, variant)
        for model in universe
        for layer in model.spec.layers
        for variant in layer.variants
    ]
    if not layer_pool:
        raise ValueError("universe has no compiled variants")
    observations = []
    for k in range(n_snapshots):
        n_blocks = int(rng.integers(0, 7))
        active: list[ActiveBlock] = []
        used = 0
        for _ in range(n_blocks):
            cores = int(rng.integers(1, 17))
            if used + cores > machine.total_cores:
                break
            layer, variant = layer_pool[int(rng.integers(0, len(layer_pool)))]
            active.append(
                ActiveBlock(
                    cores=cores,
                    bandwidth_factor=variant.bandwidth_factor,
                    footprint_units=float(variant.block_size),
                )
            )
            used += cores
        noise = (
            float(rng.uniform(-COUNTER_NOISE_MAX, COUNTER_NOISE_MAX)),
            float(rng.uniform(-COUNTER_NOISE_MAX, COUNTER_NOISE_MAX)),
        )
        snap = simulate_counters(active, machine, timestamp_s=k * 1e-3, noise=noise)
        observations.append((snap, pressure(active, machine)))
    return observations


def calibrate(
    universe: Sequence[CompiledModel],
    machine: MachineSpec,
    n_snapshots: int = 2000,
    seed: int = 0,
) -> LinearProxy:
    """Train the frozen runtime proxy from a fresh calibration trace."""
    return fit(calibration_trace(universe, machine, n_snapshots, seed))
