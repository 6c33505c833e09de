"""Deterministic simulator for adaptive multi-version compilation and
dynamic layer-block scheduling of multi-tenant DL serving workloads."""

__version__ = "0.1.0"

from .domain import (
    BlockTrace,
    ImplVariant,
    LayerBlock,
    LayerSpec,
    ModelSpec,
    Query,
    validate_model,
)
from .perfmodel import MachineSpec, CounterSnapshot
from .profile_gen import GeneratorConfig, ScheduleSample, build_universe
from .compiler import CompiledModel, compile_universe
from .proxy import LinearProxy, calibrate
from .scheduler import ConflictModel, SchedulingStrategy, StrategyKind, parse_strategy
from .engine import SimResult, WorkloadSpec, run

__all__ = [
    "__version__",
    "BlockTrace",
    "ImplVariant",
    "LayerBlock",
    "LayerSpec",
    "ModelSpec",
    "Query",
    "validate_model",
    "MachineSpec",
    "CounterSnapshot",
    "GeneratorConfig",
    "ScheduleSample",
    "build_universe",
    "CompiledModel",
    "compile_universe",
    "LinearProxy",
    "calibrate",
    "ConflictModel",
    "SchedulingStrategy",
    "StrategyKind",
    "parse_strategy",
    "SimResult",
    "WorkloadSpec",
    "run",
]
