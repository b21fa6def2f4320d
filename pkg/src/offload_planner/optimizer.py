"""Hyperparameter search: closed-form pre-decisions plus a (k, m) sweep.

Batch size, memory policy and execution strategy follow directly from the
cost model (largest batch DRAM allows, draft KV first in HBM, CPU attention
when DRAM outruns the link, large-batch MoE past the crossover).  What is left
is a small grid over draft length k and micro-batch count m, each point priced
by simulating one iteration.
"""

from __future__ import annotations

import csv
import itertools
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence, Union

import numpy as np

from .config import (
    AttentionPlacement,
    ExecStrategy,
    HardwareSpec,
    Hyperparameters,
    MemoryPolicy,
    ModelSpec,
    MoeBatching,
    WorkloadSpec,
    to_jsonable,
)
from .memory import CapacityError, MemoryPlan, max_global_batch, plan_memory
from .pipeline import (
    EventKind,
    IterationBreakdown,
    IterationContext,
    breakdown_for,
    drivers,
    iteration_context,
)
from .roofline import crossover_batch, prefer_cpu_attention
from .specdecode import DraftLengthController, expected_tokens, throughput

log = logging.getLogger(__name__)

DEFAULT_R_MISS = 0.2
DEFAULT_M_VALUES = (1, 2, 4)


# --- latency models -----------------------------------------------------------

@dataclass(frozen=True)
class LatencyModel:
    """Affine latency per event kind: seconds = slope * driver + intercept.

    Driving variables are listed in ``pipeline.drivers``.
    """

    lines: Mapping[EventKind, tuple[float, float]] = field(default_factory=dict)

    def __post_init__(self):
        for kind, (slope, intercept) in self.lines.items():
            if slope < 0 or intercept < 0:
                raise ValueError(f"{kind.value}: slope and intercept must be nonnegative")

    def has(self, kind: EventKind) -> bool:
        return kind in self.lines

    def predict(self, kind: EventKind, x: float) -> float:
        slope, intercept = self.lines[kind]
        return slope * x + intercept

    def to_dict(self) -> dict:
        return {k.value: {"slope": s, "intercept": i} for k, (s, i) in sorted(self.lines.items())}


Sample = tuple  # (EventKind | str, driving value, seconds)


def fit_latency_models(samples: Iterable[Sample]) -> LatencyModel:
    """Least-squares affine fit per kind.

    A negative slope is clamped to zero (flat line at the mean, logged as a
    warning); a negative intercept is clamped to zero by refitting through the
    origin, which small noise triggers routinely, so that is only logged at info.
    """
    grouped: dict[EventKind, list[tuple[float, float]]] = {}
    for kind, x, y in samples:
        grouped.setdefault(EventKind(kind), []).append((float(x), float(y)))
    lines = {}
    for kind, pts in grouped.items():
        xs = np.array([p[0] for p in pts])
        ys = np.array([p[1] for p in pts])
        if np.unique(xs).size < 2:
            raise ValueError(f"{kind.value}: need samples at >= 2 distinct driving values")
        slope, intercept = np.polyfit(xs, ys, 1)
        if slope < 0:
            log.warning("%s: negative fitted slope %.3g clamped to 0", kind.value, slope)
            slope, intercept = 0.0, max(float(ys.mean()), 0.0)
        elif intercept < 0:
            log.info("%s: negative fitted intercept %.3g clamped to 0", kind.value, intercept)
            slope, intercept = float(xs @ ys / (xs @ xs)), 0.0
        lines[kind] = (float(slope), float(intercept))
    return LatencyModel(lines)


def load_profile_csv(path: Union[str, Path]) -> list[Sample]:
    """Profile rows with columns kind, driving_value, seconds."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"kind", "driving_value", "seconds"} <= set(reader.fieldnames):
            raise ValueError(f"{path}: expected columns kind, driving_value, seconds")
        out = []
        for line, r in enumerate(reader, start=2):
            try:
                out.append((EventKind(r["kind"]), float(r["driving_value"]), float(r["seconds"])))
            except (TypeError, ValueError) as exc:
                raise ValueError(f"{path}:{line}: {exc}") from exc
        return out


def save_profile_csv(path: Union[str, Path], samples: Iterable[Sample]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["kind", "driving_value", "seconds"])
        for kind, x, y in samples:
            w.writerow([EventKind(kind).value, repr(float(x)), repr(float(y))])


def events_per_iteration(model: ModelSpec, ctx: IterationContext) -> dict[EventKind, int]:
    per_layer = model.n_layers * ctx.m
    return {
        EventKind.GPU_OTHER1: per_layer,
        EventKind.CPU_ATTN: per_layer,
        EventKind.GPU_OTHER2: per_layer,
        EventKind.GPU_MOE: per_layer,
        EventKind.H2D_EXPERTS: model.n_layers,
        EventKind.DRAFT_GPU_STEP: ctx.k if ctx.gpu_requests else 0,
        EventKind.DRAFT_CPU_ATTN: ctx.k if ctx.cpu_requests else 0,
        EventKind.DRAFT_GPU_FFN: ctx.k if ctx.cpu_requests else 0,
        EventKind.OVERHEAD: 1,
    }


def calibrate_latency_model(model: ModelSpec, ctx: IterationContext,
                            busy_targets: Mapping[EventKind, float]) -> LatencyModel:
    """Proportional (zero-intercept) lines whose per-kind busy time at ``ctx``
    equals ``busy_targets``."""
    x = drivers(model, ctx)
    count = events_per_iteration(model, ctx)
    lines = {}
    for kind, total in busy_targets.items():
        if count[kind] == 0 or x[kind] <= 0:
            raise ValueError(f"{kind.value}: no events to calibrate at this operating point")
        lines[kind] = (total / (count[kind] * x[kind]), 0.0)
    return LatencyModel(lines)


def synthetic_profile(truth: LatencyModel, centers: Mapping[EventKind, float], noise: float = 0.05,
                      points: int = 10, seed: int = 0) -> list[Sample]:
    """Noisy samples of ``truth`` at driving values spread over 0.25x..2x of
    each kind's center; noise is multiplicative Gaussian with std ``noise``."""
    rng = np.random.Generator(np.random.PCG64(seed))
    out = []
    for kind in sorted(truth.lines, key=lambda k: k.value):
        for x in np.linspace(0.25, 2.0, points) * centers[kind]:
            y = truth.predict(kind, x) * (1.0 + noise * rng.standard_normal())
            out.append((kind, float(x), max(float(y), 0.0)))
    return out


# --- plans --------------------------------------------------------------------

@dataclass(frozen=True)
class Plan:
    b: int
    m: int
    k: int
    memory: MemoryPlan
    expected_throughput: float
    expected_iteration: float
    committed_tokens: float
    breakdown: IterationBreakdown
    policy: MemoryPolicy = field(default_factory=MemoryPolicy)
    strategy: ExecStrategy = field(default_factory=ExecStrategy)
    r_miss: float = DEFAULT_R_MISS

    def hyperparameters(self) -> Hyperparameters:
        return Hyperparameters(self.b, self.m, self.k, self.r_miss, self.policy, self.strategy)

    def to_dict(self) -> dict:
        return {
            "b": self.b,
            "m": self.m,
            "k": self.k,
            "expected_throughput_tokens_per_s": self.expected_throughput,
            "expected_iteration_s": self.expected_iteration,
            "committed_tokens_per_iteration": self.committed_tokens,
            "mem_policy": to_jsonable(self.policy),
            "exec_strategy": to_jsonable(self.strategy),
            "expert_cache_miss_rate": self.r_miss,
        }


def predecide(hw: HardwareSpec, model: ModelSpec, workload: WorkloadSpec,
              r_miss: float = DEFAULT_R_MISS, policy: Optional[MemoryPolicy] = None):
    """Closed-form choices: ``(b, MemoryPolicy, ExecStrategy)``.

    b starts at the DRAM-limited maximum and shrinks only if spilled draft KV
    would then overflow DRAM.
    """
    policy = policy or MemoryPolicy()
    policy = replace(policy, draft_kv_gpu_priority=True)
    b = max_global_batch(hw, model, workload)
    while True:
        try:
            plan_memory(hw, model, workload, b, policy)
            break
        except CapacityError:
            if b <= 1:
                raise
            b -= 1
    placement = AttentionPlacement.CPU if prefer_cpu_attention(hw) else AttentionPlacement.GPU_TRANSFER
    batching = MoeBatching.LARGE_BATCH if b >= crossover_batch(model, r_miss) else MoeBatching.BATCH_ONE
    return b, policy, ExecStrategy(placement, batching)


def estimate(hw: HardwareSpec, model: ModelSpec, workload: WorkloadSpec, hyper: Hyperparameters,
             latency: Optional[LatencyModel] = None, plan: Optional[MemoryPlan] = None,
             prefix_len: Optional[float] = None, gpu_requests: Optional[int] = None):
    """``(iteration seconds, tokens/s, breakdown)`` for one hyperparameter point."""
    if plan is None:
        plan = plan_memory(hw, model, workload, hyper.b, hyper.mem_policy)
    ctx = iteration_context(model, workload, hyper, plan, prefix_len, gpu_requests)
    bd = breakdown_for(hw, model, ctx, latency)
    committed = expected_tokens(workload.acceptance, hyper.k)
    return bd.iteration, throughput(hyper.b, committed, bd.iteration), bd


def _rank(tp: float, k: int, m: int, prefer_k: Optional[int]) -> tuple:
    # Higher is better: throughput, then the preferred k, then smaller k, then smaller m.
    return (tp, prefer_k is not None and k == prefer_k, -k, -m)


def _k_range(workload: WorkloadSpec, k_max: Optional[int]) -> int:
    top = workload.acceptance.k_max if k_max is None else min(k_max, workload.acceptance.k_max)
    if top < 0:
        raise ValueError("k_max must be >= 0")
    return top


class _Evaluator:
    def __init__(self, hw, model, workload, latency, b, policy, strategy, r_miss,
                 prefix_len, gpu_requests=None):
        self.hw, self.model, self.workload, self.latency = hw, model, workload, latency
        self.b, self.policy, self.strategy, self.r_miss = b, policy, strategy, r_miss
        self.prefix_len, self.gpu_requests = prefix_len, gpu_requests
        self._plans: dict[int, MemoryPlan] = {}

    def memory(self, b: int) -> MemoryPlan:
        if b not in self._plans:
            self._plans[b] = plan_memory(self.hw, self.model, self.workload, b, self.policy)
        return self._plans[b]

    def __call__(self, k: int, m: int) -> Optional[Plan]:
        if self.b < m:
            return None
        hyper = Hyperparameters(self.b, m, k, self.r_miss, self.policy, self.strategy)
        mem = self.memory(hyper.b)
        it, tp, bd = estimate(self.hw, self.model, self.workload, hyper, self.latency, mem,
                              self.prefix_len, self.gpu_requests)
        committed = expected_tokens(self.workload.acceptance, k)
        return Plan(hyper.b, m, k, mem, tp, it, committed, bd, self.policy, self.strategy, self.r_miss)


def _setup(hw, model, workload, latency, r_miss, policy, b, prefix_len, gpu_requests):
    b0, pol, strat = predecide(hw, model, workload, r_miss, policy)
    if b is not None:
        b0 = min(b, b0)
        if b0 < crossover_batch(model, r_miss):
            strat = replace(strat, moe_batching=MoeBatching.BATCH_ONE)
    return _Evaluator(hw, model, workload, latency, b0, pol, strat, r_miss, prefix_len, gpu_requests)


def optimize(hw: HardwareSpec, model: ModelSpec, workload: WorkloadSpec,
             latency: Optional[LatencyModel] = None, k_max: Optional[int] = None,
             m_values: Sequence[int] = DEFAULT_M_VALUES, r_miss: float = DEFAULT_R_MISS,
             policy: Optional[MemoryPolicy] = None, b: Optional[int] = None,
             prefix_len: Optional[float] = None, prefer_k: Optional[int] = None,
             gpu_requests: Optional[int] = None) -> Plan:
    """Throughput-maximizing plan.

    Ties go to smaller k, then smaller m (or to ``prefer_k`` when given).
    ``b`` caps the batch (e.g. the number of still-active requests).
    """
    top = _k_range(workload, k_max)
    if not m_values:
        raise ValueError("m_values must be nonempty")
    evaluate = _setup(hw, model, workload, latency, r_miss, policy, b, prefix_len, gpu_requests)
    best: Optional[Plan] = None
    best_rank = None
    for m in m_values:
        for k in range(top + 1):
            cand = evaluate(k, m)
            if cand is None:
                continue
            rank = _rank(cand.expected_throughput, k, m, prefer_k)
            if best_rank is None or rank > best_rank:
                best, best_rank = cand, rank
    if best is None:
        raise CapacityError("no feasible (k, m) point")
    return best


def brute_force_oracle(hw: HardwareSpec, model: ModelSpec, workload: WorkloadSpec,
                       latency: Optional[LatencyModel] = None, k_max: Optional[int] = None,
                       m_values: Sequence[int] = DEFAULT_M_VALUES, r_miss: float = DEFAULT_R_MISS,
                       policy: Optional[MemoryPolicy] = None, b: Optional[int] = None,
                       prefix_len: Optional[float] = None, prefer_k: Optional[int] = None,
                       gpu_requests: Optional[int] = None) -> Plan:
    """Exhaustive enumeration of the same grid; a test oracle for ``optimize``."""
    top = _k_range(workload, k_max)
    evaluate = _setup(hw, model, workload, latency, r_miss, policy, b, prefix_len, gpu_requests)
    grid = list(itertools.product(range(top + 1), m_values))
    scored = [(evaluate(k, m), k, m) for k, m in grid]
    scored = [s for s in scored if s[0] is not None]
    if not scored:
        raise CapacityError("no feasible (k, m) point")
    return max(scored, key=lambda s: _rank(s[0].expected_throughput, s[1], s[2], prefer_k))[0]


def sweep_k(hw: HardwareSpec, model: ModelSpec, workload: WorkloadSpec, ks: Iterable[int],
            latency: Optional[LatencyModel] = None, hyper: Optional[Hyperparameters] = None,
            m: Optional[int] = None, prefix_len: Optional[float] = None) -> list[dict]:
    """One row per k: iteration seconds, committed tokens and throughput.

    Batch, policy and strategy come from ``hyper`` when given, otherwise from
    the pre-decisions.
    """
    if hyper is None:
        b, policy, strategy = predecide(hw, model, workload)
        hyper = Hyperparameters(b, m or 1, 0, DEFAULT_R_MISS, policy, strategy)
    elif m is not None:
        hyper = replace(hyper, m=m)
    mem = plan_memory(hw, model, workload, hyper.b, hyper.mem_policy)
    rows = []
    for k in ks:
        hk = replace(hyper, k=k)
        it, tp, _ = estimate(hw, model, workload, hk, latency, mem, prefix_len)
        rows.append({
            "k": k,
            "iteration_s": it,
            "committed_tokens": expected_tokens(workload.acceptance, k),
            "throughput_tokens_per_s": tp,
        })
    return rows


def make_draft_controller(hw: HardwareSpec, model: ModelSpec, workload: WorkloadSpec,
                          latency: Optional[LatencyModel] = None, k_max: Optional[int] = None,
                          m_values: Sequence[int] = DEFAULT_M_VALUES,
                          r_miss: float = DEFAULT_R_MISS) -> DraftLengthController:
    """Controller that re-runs the sweep for the live prefix length and batch."""
    b_max, policy, _ = predecide(hw, model, workload, r_miss)

    def best_k(prefix_len: float, active: int, previous: Optional[int]) -> int:
        plan = optimize(hw, model, workload, latency, k_max, m_values, r_miss, policy,
                        b=min(active, b_max), prefix_len=prefix_len, prefer_k=previous)
        return plan.k

    return DraftLengthController(best_k)
