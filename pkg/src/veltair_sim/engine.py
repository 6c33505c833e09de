"""Deterministic discrete-event simulation.

Single-threaded event loop over integer-nanosecond time.  Simultaneous
events are ordered (block_finish, arrival, counter_sample), then by
schedule sequence number, so results are bit-identical across runs with
identical inputs.  Queries that miss their deadline still run to
completion and are recorded as violations.

A block's execution time is priced once, at start, from the true
pressure generated by its co-runners (never by itself); interference
drift during the block is absorbed, matching the block-granularity
reaction of the scheduler.  Scheduling decisions, in contrast, see the
interference estimate of the strategy (the proxy for the adaptive
strategies, ground truth for the baselines).
"""

from __future__ import annotations

import heapq
from collections import deque
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .compiler import CompiledModel
from .domain import (
    BlockTrace,
    ImplVariant,
    LayerBlock,
    LayerSpec,
    ModelSpec,
    Query,
    ns_to_seconds,
    seconds_to_ns,
)
from .perfmodel import ActiveBlock, CounterSnapshot, MachineSpec, latency, min_core_requirement, pressure, simulate_counters
from .proxy import COUNTER_NOISE_MAX, LinearProxy, predict
from .scheduler import (
    ConflictModel,
    SchedulingStrategy,
    StrategyKind,
    apply_conflict,
    block_core_requirement,
    choose_variant,
    dynamic_threshold,
    next_block,
    planning_budget,
    soon_to_finish,
    static_variant,
)

__all__ = [
    "WorkloadSpec",
    "CounterRecord",
    "ConflictRecord",
    "SimResult",
    "SimulationInvariantError",
    "generate_arrivals",
    "price_block",
    "run",
    "MEASURE_TRIM_FRACTION",
]

_FINISH, _ARRIVAL, _SAMPLE = 0, 1, 2
_SAMPLE_PERIOD_NS = 1_000_000  # 1 ms counter cadence

# Queries arriving in the first/last 5% of the workload duration are
# excluded from metrics (warm-up / cool-down trim).
MEASURE_TRIM_FRACTION = 0.05


class SimulationInvariantError(AssertionError):
    """An internal simulation invariant (e.g. core conservation) broke."""


@dataclass(frozen=True)
class WorkloadSpec:
    """Arrival process description.

    ``entries`` maps model ids to Poisson rates (queries/s).  In
    ``inverse_qos`` mix mode the total rate is preserved but split over
    the listed models inversely proportional to their deadlines.
    """

    entries: tuple[tuple[str, float], ...]
    duration_s: float
    rng_seed: int
    mix_mode: str = "explicit"

    def __post_init__(self) -> None:
        if not self.entries:
            raise ValueError("workload needs at least one entry")
        if any(rate <= 0 for _, rate in self.entries):
            raise ValueError("arrival rates must be positive")
        if not self.duration_s > 0:
            raise ValueError("duration must be positive")
        if self.mix_mode not in ("explicit", "inverse_qos"):
            raise ValueError(f"unknown mix_mode {self.mix_mode!r}")
        if not isinstance(self.entries, tuple):
            object.__setattr__(self, "entries", tuple(tuple(e) for e in self.entries))

    def to_dict(self) -> dict:
        return {
            "entries": [[m, r] for m, r in self.entries],
            "duration_s": self.duration_s,
            "rng_seed": self.rng_seed,
            "mix_mode": self.mix_mode,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "WorkloadSpec":
        return cls(
            entries=tuple((m, r) for m, r in d["entries"]),
            duration_s=d["duration_s"],
            rng_seed=d["rng_seed"],
            mix_mode=d.get("mix_mode", "explicit"),
        )


def generate_arrivals(
    spec: WorkloadSpec, models: dict[str, ModelSpec]
) -> list[Query]:
    """Poisson arrivals per model, merged and sorted by time.

    Deterministic in the workload seed; each model entry gets an
    independent child stream so the mix composition does not perturb
    other streams.
    """
    for model_id, _ in spec.entries:
        if model_id not in models:
            raise ValueError(f"workload references unknown model {model_id!r}")

    rates = [rate for _, rate in spec.entries]
    if spec.mix_mode == "inverse_qos":
        total = sum(rates)
        inv = [1.0 / models[m].qos_s for m, _ in spec.entries]
        norm = sum(inv)
        rates = [total * w / norm for w in inv]

    duration_ns = seconds_to_ns(spec.duration_s)
    seq = np.random.SeedSequence(spec.rng_seed)
    children = seq.spawn(len(spec.entries))
    raw: list[tuple[int, int, int]] = []  # (arrival_ns, entry_idx, k)
    for idx, ((model_id, _), rate, child) in enumerate(
        zip(spec.entries, rates, children)
    ):
        rng = np.random.default_rng(child)
        t = 0.0
        k = 0
        while True:
            t += rng.exponential(1.0 / rate)
            t_ns = seconds_to_ns(t)
            if t_ns > duration_ns:
                break
            raw.append((t_ns, idx, k))
            k += 1
    raw.sort()

    queries = []
    for n, (t_ns, idx, _) in enumerate(raw):
        model_id = spec.entries[idx][0]
        qos_ns = seconds_to_ns(models[model_id].qos_s)
        queries.append(
            Query(
                query_id=f"q{n:05d}",
                model_id=model_id,
                arrival_s=ns_to_seconds(t_ns),
                deadline_s=ns_to_seconds(t_ns + qos_ns),
            )
        )
    return queries


@dataclass(frozen=True)
class CounterRecord:
    timestamp_s: float
    l3_access_rate: float
    l3_miss_rate: float
    true_interference: float

    def to_dict(self) -> dict:
        return {
            "timestamp_s": self.timestamp_s,
            "l3_access_rate": self.l3_access_rate,
            "l3_miss_rate": self.l3_miss_rate,
            "true_interference": self.true_interference,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CounterRecord":
        return cls(**d)


@dataclass(frozen=True)
class ConflictRecord:
    timestamp_s: float
    query_id: str
    block_begin: int
    requested: int
    granted: int
    overhead_s: float

    def to_dict(self) -> dict:
        return {
            "timestamp_s": self.timestamp_s,
            "query_id": self.query_id,
            "block_begin": self.block_begin,
            "requested": self.requested,
            "granted": self.granted,
            "overhead_s": self.overhead_s,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ConflictRecord":
        return cls(**d)


@dataclass
class SimResult:
    """Everything a run produced; all metrics derive from this."""

    queries: list[Query]
    counter_log: list[CounterRecord]
    conflict_log: list[ConflictRecord]
    metadata: dict

    def to_dict(self) -> dict:
        return {
            "queries": [q.to_dict() for q in self.queries],
            "counter_log": [c.to_dict() for c in self.counter_log],
            "conflict_log": [c.to_dict() for c in self.conflict_log],
            "metadata": self.metadata,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SimResult":
        return cls(
            queries=[Query.from_dict(q) for q in d["queries"]],
            counter_log=[CounterRecord.from_dict(c) for c in d["counter_log"]],
            conflict_log=[ConflictRecord.from_dict(c) for c in d["conflict_log"]],
            metadata=d["metadata"],
        )


def price_block(
    layers: Sequence[LayerSpec],
    variants: Sequence[ImplVariant],
    cores: int,
    interference: float,
    total_cores: int,
) -> float:
    """Execution seconds of a block: member latencies summed in layer
    order.  Metrics re-price traces through this same function, so
    recorded durations are reproducible bit-for-bit."""
    return sum(
        latency(l, v, cores, interference, total_cores)
        for l, v in zip(layers, variants)
    )


@dataclass
class _RunningBlock:
    query_idx: int
    block: LayerBlock
    members: tuple[LayerSpec, ...]
    variants: list[ImplVariant]
    held: int  # cores currently occupied
    layer_pos: int  # index into members of the running layer
    start_ns: int
    predicted_end_ns: int  # from start-time pricing; drives soon_to_finish
    cores_per_layer: list[int]
    interference_per_layer: list[float]
    interference_predicted: float
    conflicted: bool
    overhead_s: float

    def as_active(self) -> ActiveBlock:
        variant = self.variants[self.layer_pos]
        return ActiveBlock(
            cores=self.held,
            bandwidth_factor=variant.bandwidth_factor,
            footprint_units=float(variant.block_size),
        )


@dataclass
class _QueryRun:
    query: Query
    arrival_ns: int
    next_layer: int = 0
    traces: list[BlockTrace] = field(default_factory=list)
    finish_ns: int | None = None


class _Simulation:
    def __init__(
        self,
        universe: dict[str, CompiledModel],
        machine: MachineSpec,
        strategy: SchedulingStrategy,
        conflict_model: ConflictModel,
        proxy: LinearProxy | None,
        seed: int,
    ):
        if strategy.uses_proxy and proxy is None:
            raise ValueError(f"strategy {strategy.name} needs a fitted proxy")
        self.universe = universe
        self.machine = machine
        self.strategy = strategy
        self.conflict_model = conflict_model
        self.proxy = proxy
        self.rng = np.random.default_rng(np.random.SeedSequence((seed, 0x51B)))
        self.clock_ns = 0
        self.free_cores = machine.total_cores
        self.heap: list[tuple[int, int, int, object]] = []
        self.seq = 0
        self.non_sample_events = 0
        self.running: dict[int, _RunningBlock] = {}
        self.next_handle = 0
        self.pending: deque[int] = deque()
        self.ready: deque[int] = deque()
        self.runs: list[_QueryRun] = []
        self.counter_log: list[CounterRecord] = []
        self.conflict_log: list[ConflictRecord] = []
        # Solo-optimal version per layer, fixed at deployment time.
        self.static_variants = {
            mid: [
                static_variant(l, machine.total_cores, machine.total_cores)
                for l in cm.spec.layers
            ]
            for mid, cm in universe.items()
        }

    # -- event plumbing ----------------------------------------------------

    def _push(self, t_ns: int, prio: int, payload: object) -> None:
        heapq.heappush(self.heap, (t_ns, prio, self.seq, payload))
        self.seq += 1
        if prio != _SAMPLE:
            self.non_sample_events += 1

    def _schedule_sample(self, t_ns: int) -> None:
        if self.non_sample_events > 0:
            self._push(t_ns, _SAMPLE, None)

    # -- interference views --------------------------------------------------

    def _active_blocks(self, exclude_soon_to_finish: bool) -> list[ActiveBlock]:
        blocks = []
        for rb in self.running.values():
            if exclude_soon_to_finish and soon_to_finish(
                self.clock_ns, rb.start_ns, rb.predicted_end_ns
            ):
                continue
            blocks.append(rb.as_active())
        return blocks

    def _true_pressure(self) -> float:
        return pressure(self._active_blocks(False), self.machine)

    def _snapshot(self, active: list[ActiveBlock]) -> CounterSnapshot:
        noise = (
            float(self.rng.uniform(-COUNTER_NOISE_MAX, COUNTER_NOISE_MAX)),
            float(self.rng.uniform(-COUNTER_NOISE_MAX, COUNTER_NOISE_MAX)),
        )
        return simulate_counters(
            active, self.machine, ns_to_seconds(self.clock_ns), noise
        )

    def _decision_interference(self) -> float:
        """What the scheduler believes the pressure is right now."""
        if self.strategy.uses_proxy:
            active = self._active_blocks(exclude_soon_to_finish=True)
            return predict(self.proxy, self._snapshot(active))
        return self._true_pressure()

    # -- scheduling ----------------------------------------------------------

    def _form_block(self, q_idx: int, decision_i: float) -> LayerBlock:
        run = self.runs[q_idx]
        cm = self.universe[run.query.model_id]
        model = cm.spec
        begin = run.next_layer
        kind = self.strategy.kind
        total = self.machine.total_cores

        if kind is StrategyKind.MODEL_WISE_FCFS:
            variants = self.static_variants[model.model_id]
            return LayerBlock(
                model_ref=model.model_id,
                layer_range=(0, model.num_layers),
                core_alloc=model.avg_core,
                block_qos_s=model.qos_s,
                chosen_variant_per_layer=tuple(v.variant_id for v in variants),
                overflow=False,
            )

        if kind in (StrategyKind.LAYER_WISE, StrategyKind.VELTAIR_AC):
            layer = model.layers[begin]
            if kind is StrategyKind.VELTAIR_AC:
                variant = choose_variant(layer, decision_i, model.avg_core, total)
            else:
                variant = self.static_variants[model.model_id][begin]
            req = min_core_requirement(
                layer,
                variant,
                decision_i,
                total,
                budget_s=planning_budget(layer.qos_budget_s),
            )
            return LayerBlock(
                model_ref=model.model_id,
                layer_range=(begin, begin + 1),
                core_alloc=min(req, total),
                block_qos_s=layer.qos_budget_s,
                chosen_variant_per_layer=(variant.variant_id,),
                overflow=req > total,
            )

        if kind is StrategyKind.FIXED_BLOCK:
            end = min(begin + self.strategy.fixed_block_size, model.num_layers)
            members = model.layers[begin:end]
            variants = self.static_variants[model.model_id][begin:end]
            budget = sum(l.qos_budget_s for l in members)
            req = block_core_requirement(
                members, variants, planning_budget(budget), decision_i, self.machine
            )
            return LayerBlock(
                model_ref=model.model_id,
                layer_range=(begin, end),
                core_alloc=min(req, total),
                block_qos_s=budget,
                chosen_variant_per_layer=tuple(v.variant_id for v in variants),
                overflow=req > total,
            )

        # veltair_as / veltair_full: dynamic-threshold layer blocks.
        active = self._active_tasks(include=q_idx)
        thresholds = dynamic_threshold([a for _, a in active], total)
        my_thres = thresholds[[idx for idx, _ in active].index(q_idx)]
        return next_block(
            model,
            begin,
            decision_i,
            my_thres,
            self.machine,
            adaptive_variants=self.strategy.adaptive_variants,
        )

    def _active_tasks(self, include: int) -> list[tuple[int, int]]:
        """(query index, model avg_core) per task in flight, the
        requesting task included, in canonical query order."""
        indices = {rb.query_idx for rb in self.running.values()}
        indices.update(self.ready)
        indices.add(include)
        return [
            (i, self.universe[self.runs[i].query.model_id].spec.avg_core)
            for i in sorted(indices)
        ]

    def _start_block(self, q_idx: int) -> None:
        run = self.runs[q_idx]
        cm = self.universe[run.query.model_id]
        model = cm.spec
        decision_i = self._decision_interference()
        block = self._form_block(q_idx, decision_i)

        requested = block.core_alloc
        granted, overhead_s = apply_conflict(
            requested, self.free_cores, self.conflict_model, self.rng
        )
        if granted < 1:
            raise SimulationInvariantError("attempted start with no free cores")
        conflicted = granted < requested

        price_i = self._true_pressure()
        begin, end = block.layer_range
        members = model.layers[begin:end]
        variants = [
            _variant_by_id(l, vid)
            for l, vid in zip(members, block.chosen_variant_per_layer)
        ]
        predicted_s = (
            price_block(members, variants, granted, price_i, self.machine.total_cores)
            + overhead_s
        )

        self.free_cores -= granted
        handle = self.next_handle
        self.next_handle += 1
        rb = _RunningBlock(
            query_idx=q_idx,
            block=block,
            members=tuple(members),
            variants=variants,
            held=granted,
            layer_pos=0,
            start_ns=self.clock_ns,
            predicted_end_ns=self.clock_ns + seconds_to_ns(predicted_s),
            cores_per_layer=[granted],
            interference_per_layer=[price_i],
            interference_predicted=decision_i,
            conflicted=conflicted,
            overhead_s=overhead_s,
        )
        self.running[handle] = rb
        first_seg_ns = seconds_to_ns(overhead_s) + seconds_to_ns(
            latency(members[0], variants[0], granted, price_i, self.machine.total_cores)
        )
        self._push(self.clock_ns + first_seg_ns, _FINISH, handle)
        if conflicted:
            self.conflict_log.append(
                ConflictRecord(
                    timestamp_s=ns_to_seconds(self.clock_ns),
                    query_id=run.query.query_id,
                    block_begin=begin,
                    requested=requested,
                    granted=granted,
                    overhead_s=overhead_s,
                )
            )

    def _finish_layer(self, handle: int) -> None:
        """One layer of a running block completed; upgrade toward the
        requested width if cores freed up, then run the next layer or
        retire the block."""
        rb = self.running[handle]
        if rb.layer_pos + 1 < len(rb.members):
            if rb.held < rb.block.core_alloc and self.free_cores > 0:
                extra = min(self.free_cores, rb.block.core_alloc - rb.held)
                self.free_cores -= extra
                rb.held += extra
            rb.layer_pos += 1
            layer = rb.members[rb.layer_pos]
            variant = rb.variants[rb.layer_pos]
            # Pressure from co-runners only; a block never slows itself.
            others = [
                b.as_active() for h, b in self.running.items() if h != handle
            ]
            seg_i = pressure(others, self.machine)
            rb.cores_per_layer.append(rb.held)
            rb.interference_per_layer.append(seg_i)
            seg_ns = seconds_to_ns(
                latency(layer, variant, rb.held, seg_i, self.machine.total_cores)
            )
            self._push(self.clock_ns + seg_ns, _FINISH, handle)
            return

        del self.running[handle]
        self.free_cores += rb.held
        run = self.runs[rb.query_idx]
        run.traces.append(
            BlockTrace(
                block=rb.block,
                start_s=ns_to_seconds(rb.start_ns),
                end_s=ns_to_seconds(self.clock_ns),
                cores=rb.held,
                interference_at_start=rb.interference_per_layer[0],
                interference_predicted=rb.interference_predicted,
                cores_per_layer=tuple(rb.cores_per_layer),
                interference_per_layer=tuple(rb.interference_per_layer),
                conflicted=rb.conflicted,
                overhead_s=rb.overhead_s,
            )
        )
        run.next_layer = rb.block.layer_range[1]
        model = self.universe[run.query.model_id].spec
        if run.next_layer >= model.num_layers:
            run.finish_ns = self.clock_ns
        else:
            self.ready.append(rb.query_idx)

    def _can_admit(self, q_idx: int) -> bool:
        # The dispatcher hands a task to a worker only when the model's
        # average core demand is idle.  This bounds co-location near
        # the machine's nominal capacity for every strategy
        # (model_wise then holds exactly that allocation).
        model = self.universe[self.runs[q_idx].query.model_id].spec
        return self.free_cores >= model.avg_core

    def _service(self) -> None:
        # Workers between blocks go first (they hold partial progress),
        # then admission of queued arrivals.  model_wise_fcfs admits
        # strictly in order (head-of-line blocking is the point of
        # FCFS); the other strategies backfill, admitting the first
        # queued task that fits.
        n_ready = len(self.ready)
        for _ in range(n_ready):
            if self.free_cores < 1:
                break
            q_idx = self.ready.popleft()
            self._start_block(q_idx)
        if self.strategy.kind is StrategyKind.MODEL_WISE_FCFS:
            while self.pending and self._can_admit(self.pending[0]):
                self._start_block(self.pending.popleft())
        else:
            progress = True
            while progress and self.pending:
                progress = False
                for i, q_idx in enumerate(self.pending):
                    if self._can_admit(q_idx):
                        del self.pending[i]
                        self._start_block(q_idx)
                        progress = True
                        break

    def _check_core_conservation(self) -> None:
        used = sum(rb.held for rb in self.running.values())
        if used + self.free_cores != self.machine.total_cores:
            raise SimulationInvariantError(
                f"core pool leak: {used} used + {self.free_cores} free "
                f"!= {self.machine.total_cores}"
            )
        if self.free_cores < 0:
            raise SimulationInvariantError("negative free-core pool")

    def run_loop(self, queries: list[Query]) -> None:
        for q in queries:
            self.runs.append(_QueryRun(query=q, arrival_ns=seconds_to_ns(q.arrival_s)))
        for idx, run in enumerate(self.runs):
            self._push(run.arrival_ns, _ARRIVAL, idx)
        if self.runs:
            self._push(0, _SAMPLE, None)

        while self.heap:
            t_ns, prio, _, payload = heapq.heappop(self.heap)
            if t_ns < self.clock_ns:
                raise SimulationInvariantError("time went backwards")
            self.clock_ns = t_ns
            if prio == _FINISH:
                self.non_sample_events -= 1
                self._finish_layer(payload)
            elif prio == _ARRIVAL:
                self.non_sample_events -= 1
                self.pending.append(payload)
            else:
                active = self._active_blocks(False)
                snap = self._snapshot(active)
                self.counter_log.append(
                    CounterRecord(
                        timestamp_s=snap.timestamp_s,
                        l3_access_rate=snap.l3_access_rate,
                        l3_miss_rate=snap.l3_miss_rate,
                        true_interference=pressure(active, self.machine),
                    )
                )
                self._schedule_sample(t_ns + _SAMPLE_PERIOD_NS)
            # Act once per timestamp batch, after frees and arrivals.
            if not self.heap or self.heap[0][0] > t_ns:
                self._service()
                self._check_core_conservation()

        if self.running or self.pending or self.ready:
            raise SimulationInvariantError("simulation ended with work in flight")


def _variant_by_id(layer: LayerSpec, variant_id: str) -> ImplVariant:
    for v in layer.variants:
        if v.variant_id == variant_id:
            return v
    raise KeyError(f"layer {layer.layer_id} has no variant {variant_id!r}")


def run(
    universe: Sequence[CompiledModel],
    machine: MachineSpec,
    workload: WorkloadSpec,
    strategy: SchedulingStrategy,
    seed: int,
    conflict_model: ConflictModel | None = None,
    proxy: LinearProxy | None = None,
) -> SimResult:
    """Simulate one workload under one strategy.

    ``seed`` drives the counter-noise and stochastic-conflict streams;
    arrivals use the workload's own seed.  Raises ValueError for
    unknown model ids before any simulation happens.
    """
    by_id = {cm.spec.model_id: cm for cm in universe}
    for model_id, _ in workload.entries:
        if model_id not in by_id:
            raise ValueError(f"workload references unknown model {model_id!r}")
    cm_models = {mid: cm.spec for mid, cm in by_id.items()}

    queries = generate_arrivals(workload, cm_models)
    sim = _Simulation(
        by_id,
        machine,
        strategy,
        conflict_model or ConflictModel(),
        proxy,
        seed,
    )
    sim.run_loop(queries)

    completed = []
    for run_state in sim.runs:
        if run_state.finish_ns is None:
            raise SimulationInvariantError(
                f"query {run_state.query.query_id} never finished"
            )
        completed.append(
            Query(
                query_id=run_state.query.query_id,
                model_id=run_state.query.model_id,
                arrival_s=run_state.query.arrival_s,
                deadline_s=run_state.query.deadline_s,
                finish_s=ns_to_seconds(run_state.finish_ns),
                per_block_trace=tuple(run_state.traces),
            )
        )

    trim = MEASURE_TRIM_FRACTION * workload.duration_s
    metadata = {
        "strategy": strategy.name,
        "seed": seed,
        "machine": machine.to_dict(),
        "workload": workload.to_dict(),
        "conflict_model": (conflict_model or ConflictModel()).to_dict(),
        "proxy": proxy.to_dict() if proxy is not None else None,
        "measured_window_s": [trim, workload.duration_s - trim],
    }
    return SimResult(
        queries=completed,
        counter_log=sim.counter_log,
        conflict_log=sim.conflict_log,
        metadata=metadata,
    )
