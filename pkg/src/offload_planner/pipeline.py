"""Event-DAG model of one decode iteration and its list-scheduled timeline.

An iteration is the draft phase (k autoregressive draft steps, requests split
between a GPU-only part and a CPU-attention part) followed by the target
verification pass: per layer and micro-batch the chain GPU_OTHER1 -> CPU_ATTN
-> GPU_OTHER2 -> GPU_MOE, with the expert weights of every layer streamed over
the host-to-device link ahead of use.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import TYPE_CHECKING, Callable, Iterable, Mapping, Optional, Union

from .config import AttentionPlacement, HardwareSpec, Hyperparameters, ModelSpec, MoeBatching, WorkloadSpec
from .memory import MemoryPlan, dynamic_split_ratio
from .roofline import (
    CostVector,
    attention_cost_cpu,
    attention_cost_gpu_transfer,
    binding_time,
    moe_cost_batch1,
    moe_cost_large_batch,
)

if TYPE_CHECKING:
    from .optimizer import LatencyModel


class EventKind(str, Enum):
    GPU_OTHER1 = "GPU_OTHER1"
    CPU_ATTN = "CPU_ATTN"
    GPU_OTHER2 = "GPU_OTHER2"
    GPU_MOE = "GPU_MOE"
    H2D_EXPERTS = "H2D_EXPERTS"
    DRAFT_GPU_STEP = "DRAFT_GPU_STEP"
    DRAFT_CPU_ATTN = "DRAFT_CPU_ATTN"
    DRAFT_GPU_FFN = "DRAFT_GPU_FFN"
    OVERHEAD = "OVERHEAD"


class Lane(str, Enum):
    GPU = "GPU"
    CPU = "CPU"
    H2D = "H2D"


LANES = tuple(Lane)

DEFAULT_LANE = {
    EventKind.GPU_OTHER1: Lane.GPU,
    EventKind.CPU_ATTN: Lane.CPU,
    EventKind.GPU_OTHER2: Lane.GPU,
    EventKind.GPU_MOE: Lane.GPU,
    EventKind.H2D_EXPERTS: Lane.H2D,
    EventKind.DRAFT_GPU_STEP: Lane.GPU,
    EventKind.DRAFT_CPU_ATTN: Lane.CPU,
    EventKind.DRAFT_GPU_FFN: Lane.GPU,
    EventKind.OVERHEAD: Lane.GPU,
}


class CycleError(ValueError):
    pass


@dataclass(frozen=True)
class EventNode:
    id: int
    kind: EventKind
    resource: Lane
    duration: float
    deps: frozenset = frozenset()
    name: str = ""


@dataclass
class EventDag:
    nodes: list[EventNode] = field(default_factory=list)

    def add(self, kind: EventKind, duration: float, deps: Iterable[int] = (), name: str = "",
            resource: Optional[Lane] = None) -> int:
        if duration < 0:
            raise ValueError(f"negative duration for {kind.value}")
        node_id = len(self.nodes)
        self.nodes.append(EventNode(
            node_id, kind, resource or DEFAULT_LANE[kind], float(duration), frozenset(deps),
            name or f"{kind.value}#{node_id}",
        ))
        return node_id

    def __len__(self) -> int:
        return len(self.nodes)


@dataclass(frozen=True)
class Schedule:
    dag: EventDag
    start: dict
    end: dict
    makespan: float
    busy: dict

    def busy_by_kind(self, kind: EventKind) -> float:
        return sum(n.duration for n in self.dag.nodes if n.kind == kind)


def simulate(dag: EventDag) -> Schedule:
    """Deterministic list schedule of ``dag``.

    Events are dispatched one at a time in a topological order: among the
    events whose dependencies are already placed, the one that can start
    earliest goes next (ties by id).  Each starts at the later of its lane
    becoming free and its last dependency finishing.
    """
    by_id = {n.id: n for n in dag.nodes}
    if len(by_id) != len(dag.nodes):
        raise ValueError("duplicate event ids")
    waiting = {n.id: len(n.deps) for n in dag.nodes}
    children: dict[int, list[int]] = {n.id: [] for n in dag.nodes}
    for n in dag.nodes:
        for d in n.deps:
            if d not in by_id:
                raise ValueError(f"event {n.id} depends on unknown event {d}")
            children[d].append(n.id)

    lane_free = {lane: 0.0 for lane in LANES}
    ready_at: dict[int, float] = {i: 0.0 for i, c in waiting.items() if c == 0}
    start: dict[int, float] = {}
    end: dict[int, float] = {}

    while ready_at:
        best = min(ready_at, key=lambda i: (max(ready_at[i], lane_free[by_id[i].resource]), i))
        node = by_id[best]
        t0 = max(ready_at.pop(best), lane_free[node.resource])
        start[best] = t0
        end[best] = t0 + node.duration
        lane_free[node.resource] = end[best]
        for c in children[best]:
            waiting[c] -= 1
            if waiting[c] == 0:
                ready_at[c] = max(end[d] for d in by_id[c].deps)

    if len(start) != len(dag.nodes):
        raise CycleError("event graph contains a cycle")
    busy = {lane: 0.0 for lane in LANES}
    for n in dag.nodes:
        busy[n.resource] += n.duration
    return Schedule(dag, start, end, max(end.values(), default=0.0), busy)


# --- DAG builders -----------------------------------------------------------

DurationFn = Callable[[EventKind, int, int], float]


def _as_fn(durations: Union[Mapping[EventKind, float], DurationFn]) -> DurationFn:
    if callable(durations):
        return durations
    return lambda kind, _a, _b: durations.get(kind, 0.0)


def build_target_dag(durations, n_layers: int, m: int, k: int = 0,
                     attention_lane: Lane = Lane.CPU) -> EventDag:
    """Verification pass: ``durations`` maps kind -> seconds per event, or is a
    callable ``(kind, layer, micro_batch) -> seconds``.

    Layer ``i+1`` of a micro-batch starts after its layer-``i`` MoE; expert
    transfers are chained on the link and only gate the MoE of their layer.
    ``k`` is carried for naming only; its cost is inside the durations.
    """
    if m < 1 or n_layers < 1:
        raise ValueError("need m >= 1 and n_layers >= 1")
    dur = _as_fn(durations)
    dag = EventDag()
    prev_h2d: Optional[int] = None
    prev_moe: dict[int, int] = {}
    for i in range(n_layers):
        h2d = dag.add(EventKind.H2D_EXPERTS, dur(EventKind.H2D_EXPERTS, i, 0),
                      [] if prev_h2d is None else [prev_h2d], f"L{i}.H2D_EXPERTS")
        prev_h2d = h2d
        for j in range(m):
            o1 = dag.add(EventKind.GPU_OTHER1, dur(EventKind.GPU_OTHER1, i, j),
                         [prev_moe[j]] if j in prev_moe else [], f"L{i}.mb{j}.GPU_OTHER1")
            attn = dag.add(EventKind.CPU_ATTN, dur(EventKind.CPU_ATTN, i, j), [o1],
                           f"L{i}.mb{j}.CPU_ATTN", resource=attention_lane)
            o2 = dag.add(EventKind.GPU_OTHER2, dur(EventKind.GPU_OTHER2, i, j), [attn],
                         f"L{i}.mb{j}.GPU_OTHER2")
            prev_moe[j] = dag.add(EventKind.GPU_MOE, dur(EventKind.GPU_MOE, i, j), [o2, h2d],
                                  f"L{i}.mb{j}.GPU_MOE")
    return dag


def build_draft_dag(durations, k: int, gpu_split_requests: int, cpu_split_requests: int) -> EventDag:
    """``k`` draft steps; the GPU-only part and the CPU-attention part of each
    step run side by side and both must finish before the next step."""
    if k < 1:
        raise ValueError("draft DAG needs k >= 1")
    dur = _as_fn(durations)
    dag = EventDag()
    prev: list[int] = []
    for t in range(k):
        step: list[int] = []
        if gpu_split_requests > 0:
            step.append(dag.add(EventKind.DRAFT_GPU_STEP, dur(EventKind.DRAFT_GPU_STEP, t, 0), prev,
                                f"step{t}.DRAFT_GPU_STEP"))
        if cpu_split_requests > 0:
            attn = dag.add(EventKind.DRAFT_CPU_ATTN, dur(EventKind.DRAFT_CPU_ATTN, t, 0), prev,
                           f"step{t}.DRAFT_CPU_ATTN")
            step.append(dag.add(EventKind.DRAFT_GPU_FFN, dur(EventKind.DRAFT_GPU_FFN, t, 0), [attn],
                                f"step{t}.DRAFT_GPU_FFN"))
        prev = step
    return dag


# --- per-event duration models ----------------------------------------------

@dataclass(frozen=True)
class IterationContext:
    """Everything the per-event cost of one iteration depends on."""

    b: int
    m: int
    k: int
    s: float
    gpu_requests: int
    cpu_requests: int
    attention_placement: AttentionPlacement = AttentionPlacement.CPU
    moe_batching: MoeBatching = MoeBatching.LARGE_BATCH
    r_miss: float = 0.2

    @property
    def queries(self) -> int:
        # Verification scores the k drafts plus the last committed token.
        return self.k + 1

    @property
    def micro_batch(self) -> float:
        return self.b / self.m


def drivers(model: ModelSpec, ctx: IterationContext) -> dict[EventKind, float]:
    """Driving variable of each event kind, the x of its fitted latency line.

    GPU_OTHER*/GPU_MOE: tokens in the micro-batch; CPU_ATTN: mb*(s+q)*q;
    H2D_EXPERTS: bytes per layer; DRAFT_GPU_STEP / DRAFT_CPU_ATTN: KV tokens
    read per step by that part; DRAFT_GPU_FFN: CPU-part requests;
    OVERHEAD: b*(k+1).
    """
    mb, q = ctx.micro_batch, ctx.queries
    return {
        EventKind.GPU_OTHER1: mb * q,
        EventKind.CPU_ATTN: mb * (ctx.s + q) * q,
        EventKind.GPU_OTHER2: mb * q,
        EventKind.GPU_MOE: mb * q,
        EventKind.H2D_EXPERTS: _h2d_bytes(model, ctx),
        EventKind.DRAFT_GPU_STEP: ctx.gpu_requests * ctx.s,
        EventKind.DRAFT_CPU_ATTN: ctx.cpu_requests * ctx.s,
        EventKind.DRAFT_GPU_FFN: float(ctx.cpu_requests),
        EventKind.OVERHEAD: ctx.b * q,
    }


def _h2d_bytes(model: ModelSpec, ctx: IterationContext) -> float:
    if ctx.moe_batching == MoeBatching.LARGE_BATCH:
        return moe_cost_large_batch(model, 1).h2d_bytes
    # Batch-one kernels fetch each token's missed experts separately.
    return moe_cost_batch1(model, ctx.r_miss).h2d_bytes * ctx.b * ctx.queries


def analytic_durations(hw: HardwareSpec, model: ModelSpec, ctx: IterationContext) -> dict[EventKind, float]:
    """Roofline time of every event kind from first-principles costs."""
    mb, q, s = ctx.micro_batch, ctx.queries, ctx.s
    h, bpe, kv_h = model.h, model.bytes_per_elem, model.h / model.g
    tokens = mb * q

    qkv_w = h * (h + 2 * kv_h)
    other1 = CostVector(gpu_ops=2 * tokens * qkv_w, gpu_mem_bytes=qkv_w * bpe)
    out_w = h * h + h * model.n_expert
    other2 = CostVector(gpu_ops=2 * tokens * out_w, gpu_mem_bytes=out_w * bpe)

    if ctx.attention_placement == AttentionPlacement.CPU:
        attn = attention_cost_cpu(model, mb, s, q)
    else:
        # Modeled as one event on the link lane; its GPU compute is folded in.
        t = attention_cost_gpu_transfer(model, mb, s)
        attn = CostVector(gpu_ops=t.gpu_ops * q, gpu_mem_bytes=t.gpu_mem_bytes, h2d_bytes=t.h2d_bytes)

    # Expert transfer is its own event; the MoE event only computes and reads HBM.
    if ctx.moe_batching == MoeBatching.LARGE_BATCH:
        big = moe_cost_large_batch(model, tokens)
        moe = CostVector(gpu_ops=big.gpu_ops, gpu_mem_bytes=big.gpu_mem_bytes)
    else:
        one = moe_cost_batch1(model, ctx.r_miss)
        moe = CostVector(gpu_ops=one.gpu_ops * tokens, gpu_mem_bytes=one.gpu_mem_bytes * tokens)
    h2d = _h2d_bytes(model, ctx) / hw.b_h2d

    d = model.draft
    attn_ops = 2 * 2 * s * h * d.n_layers  # one query row per request per step
    gpu_step = CostVector(
        gpu_ops=ctx.gpu_requests * (d.ffn_ops_per_token + attn_ops),
        gpu_mem_bytes=d.param_bytes + ctx.gpu_requests * s * d.kv_bytes_per_token,
    ) if ctx.gpu_requests else CostVector()
    cpu_attn = CostVector(
        cpu_ops=ctx.cpu_requests * attn_ops,
        cpu_mem_bytes=ctx.cpu_requests * s * d.kv_bytes_per_token,
    )
    cpu_ffn = CostVector(
        gpu_ops=ctx.cpu_requests * d.ffn_ops_per_token, gpu_mem_bytes=d.param_bytes,
    ) if ctx.cpu_requests else CostVector()

    return {
        EventKind.GPU_OTHER1: binding_time(other1, hw),
        EventKind.CPU_ATTN: binding_time(attn, hw),
        EventKind.GPU_OTHER2: binding_time(other2, hw),
        EventKind.GPU_MOE: binding_time(moe, hw),
        EventKind.H2D_EXPERTS: h2d,
        EventKind.DRAFT_GPU_STEP: binding_time(gpu_step, hw),
        EventKind.DRAFT_CPU_ATTN: binding_time(cpu_attn, hw),
        EventKind.DRAFT_GPU_FFN: binding_time(cpu_ffn, hw),
        # Verification bookkeeping is only known from profiles.
        EventKind.OVERHEAD: 0.0,
    }


def event_durations(hw: HardwareSpec, model: ModelSpec, ctx: IterationContext,
                    latency: Optional["LatencyModel"] = None) -> dict[EventKind, float]:
    """Analytic durations, overridden per kind by any fitted latency line."""
    out = analytic_durations(hw, model, ctx)
    if latency is not None:
        x = drivers(model, ctx)
        for kind in EventKind:
            if latency.has(kind):
                out[kind] = latency.predict(kind, x[kind])
    if ctx.k == 0:
        for kind in (EventKind.DRAFT_GPU_STEP, EventKind.DRAFT_CPU_ATTN, EventKind.DRAFT_GPU_FFN):
            out[kind] = 0.0
    return out


# --- iteration --------------------------------------------------------------

BREAKDOWN_LABELS = (
    "Target model", "CPU Attention", "GPU MoE", "HtoD Transfer",
    "Draft model", "GPU Part", "CPU Part", "Others", "Iteration",
)


@dataclass(frozen=True)
class IterationBreakdown:
    target_model: float
    cpu_attention: float
    gpu_moe: float
    htod_transfer: float
    draft_model: float
    gpu_part: float
    cpu_part: float
    others: float
    iteration: float
    target_schedule: Optional[Schedule] = field(default=None, repr=False, compare=False)
    draft_schedule: Optional[Schedule] = field(default=None, repr=False, compare=False)

    def rows(self) -> list[tuple[str, float]]:
        values = (
            self.target_model, self.cpu_attention, self.gpu_moe, self.htod_transfer,
            self.draft_model, self.gpu_part, self.cpu_part, self.others, self.iteration,
        )
        return list(zip(BREAKDOWN_LABELS, values))

    def to_dict(self) -> dict:
        return {label: value for label, value in self.rows()}

    def format_table(self) -> str:
        lines = [f"{'':<15}{'seconds':>12}"]
        for label, value in self.rows():
            lines.append(f"{label:<15}{value:>12.4f}")
        return "\n".join(lines)

    def timeline(self) -> list[dict]:
        """Draft phase, then verification, then the overhead slot."""
        events = []
        offset = 0.0
        for phase, sched in (("draft", self.draft_schedule), ("target", self.target_schedule)):
            if sched is None:
                continue
            events.extend(_schedule_records(sched, offset, phase))
            offset += sched.makespan
        if self.others > 0:
            events.append({"name": "OVERHEAD", "kind": EventKind.OVERHEAD.value, "lane": Lane.GPU.value,
                           "start": offset, "duration": self.others, "phase": "other"})
        return events


def iteration_context(model: ModelSpec, workload: WorkloadSpec, hyper: Hyperparameters,
                      plan: MemoryPlan, prefix_len: Optional[float] = None,
                      gpu_requests: Optional[int] = None) -> IterationContext:
    s = workload.mean_prefix_len if prefix_len is None else prefix_len
    if gpu_requests is None:
        gpu_requests = dynamic_split_ratio(plan, model, s, hyper.b)
    gpu_requests = min(gpu_requests, hyper.b)
    return IterationContext(
        b=hyper.b, m=hyper.m, k=hyper.k, s=s,
        gpu_requests=gpu_requests, cpu_requests=hyper.b - gpu_requests,
        attention_placement=hyper.exec_strategy.attention_placement,
        moe_batching=hyper.exec_strategy.moe_batching,
        r_miss=hyper.expert_cache_miss_rate,
    )


def iteration_time(hw: HardwareSpec, model: ModelSpec, workload: WorkloadSpec, hyper: Hyperparameters,
                   plan: MemoryPlan, latency: Optional["LatencyModel"] = None,
                   prefix_len: Optional[float] = None, gpu_requests: Optional[int] = None) -> IterationBreakdown:
    """Simulate one decode iteration and break its time down by component.

    ``prefix_len`` defaults to the mean prefix over the generation.
    """
    ctx = iteration_context(model, workload, hyper, plan, prefix_len, gpu_requests)
    return breakdown_for(hw, model, ctx, latency)


def breakdown_for(hw: HardwareSpec, model: ModelSpec, ctx: IterationContext,
                  latency: Optional["LatencyModel"] = None) -> IterationBreakdown:
    dur = event_durations(hw, model, ctx, latency)
    lane = Lane.CPU if ctx.attention_placement == AttentionPlacement.CPU else Lane.H2D
    target = simulate(build_target_dag(dur, model.n_layers, ctx.m, ctx.k, attention_lane=lane))

    draft = None
    if ctx.k > 0:
        draft = simulate(build_draft_dag(dur, ctx.k, ctx.gpu_requests, ctx.cpu_requests))
    overhead = dur[EventKind.OVERHEAD]
    draft_time = draft.makespan if draft else 0.0

    def busy(sched: Optional[Schedule], *kinds: EventKind) -> float:
        return sum(sched.busy_by_kind(k) for k in kinds) if sched else 0.0

    return IterationBreakdown(
        target_model=target.makespan,
        cpu_attention=busy(target, EventKind.CPU_ATTN),
        gpu_moe=busy(target, EventKind.GPU_MOE),
        htod_transfer=busy(target, EventKind.H2D_EXPERTS),
        draft_model=draft_time,
        gpu_part=busy(draft, EventKind.DRAFT_GPU_STEP),
        cpu_part=busy(draft, EventKind.DRAFT_CPU_ATTN, EventKind.DRAFT_GPU_FFN),
        others=overhead,
        iteration=target.makespan + draft_time + overhead,
        target_schedule=target,
        draft_schedule=draft,
    )


# --- trace export -----------------------------------------------------------

def _schedule_records(schedule: Schedule, offset: float = 0.0, phase: str = "") -> list[dict]:
    out = []
    for n in sorted(schedule.dag.nodes, key=lambda n: (schedule.start[n.id], n.id)):
        rec = {"name": n.name, "kind": n.kind.value, "lane": n.resource.value,
               "start": offset + schedule.start[n.id], "duration": n.duration}
        if phase:
            rec["phase"] = phase
        out.append(rec)
    return out


_LANE_TID = {lane: i for i, lane in enumerate(LANES)}


def trace_events(records: Iterable[dict]) -> list[dict]:
    """Complete ("X") events in the JSON-array trace format; times in microseconds."""
    out = []
    for r in records:
        lane = Lane(r["lane"])
        out.append({
            "name": r["name"],
            "cat": r["kind"],
            "ph": "X",
            "ts": r["start"] * 1e6,
            "dur": r["duration"] * 1e6,
            "pid": 0,
            "tid": _LANE_TID[lane],
            "args": {"lane": lane.value, **({"phase": r["phase"]} if "phase" in r else {})},
        })
    return out


def emit_trace(schedule: Union[Schedule, IterationBreakdown],
               out: Union[str, Path, None] = None) -> list[dict]:
    """Trace records for a schedule (or a whole iteration); written if ``out``."""
    if isinstance(schedule, IterationBreakdown):
        events = trace_events(schedule.timeline())
    else:
        events = trace_events(_schedule_records(schedule))
    if out is not None:
        Path(out).write_text(json.dumps(events, indent=1) + "\n")
    return events
