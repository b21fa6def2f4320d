import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from offload_planner.config import AttentionPlacement, Hyperparameters
from offload_planner.memory import plan_memory
from offload_planner.optimizer import LatencyModel
from offload_planner.pipeline import (
    BREAKDOWN_LABELS,
    CycleError,
    EventDag,
    EventKind,
    IterationContext,
    Lane,
    breakdown_for,
    build_draft_dag,
    build_target_dag,
    emit_trace,
    iteration_time,
    simulate,
)

from pipeline_cases import pipeline_durations, random_chain, random_dag, schedule_violations

E = EventKind


def test_tiny_target_dag():
    d = {E.GPU_OTHER1: 1, E.CPU_ATTN: 2, E.GPU_OTHER2: 1, E.GPU_MOE: 3, E.H2D_EXPERTS: 4}
    assert simulate(build_target_dag(d, 1, 1)).makespan == 7


def test_target_dag_structure():
    dag = build_target_dag({}, 3, 2)
    assert len(dag) == 3 * (1 + 2 * 4)
    by_name = {n.name: n for n in dag.nodes}
    moe = by_name["L1.mb0.GPU_MOE"]
    assert by_name["L1.H2D_EXPERTS"].id in moe.deps
    assert by_name["L0.H2D_EXPERTS"].id in by_name["L1.H2D_EXPERTS"].deps
    assert by_name["L0.mb1.GPU_MOE"].id in by_name["L1.mb1.GPU_OTHER1"].deps


def test_micro_batches_overlap():
    whole = {E.GPU_OTHER1: 1, E.CPU_ATTN: 1, E.GPU_OTHER2: 1, E.GPU_MOE: 1, E.H2D_EXPERTS: 0}
    half = {k: v / 2 for k, v in whole.items()}
    one = simulate(build_target_dag(whole, 1, 1))
    two = simulate(build_target_dag(half, 1, 2))
    assert two.makespan < one.makespan == 4
    names = {n.name: n.id for n in two.dag.nodes}
    # mb1's first GPU op runs while mb0 is on the CPU
    assert two.start[names["L0.mb1.GPU_OTHER1"]] < two.end[names["L0.mb0.CPU_ATTN"]]


def test_no_cpu_work_exposes_first_transfer():
    d = {E.GPU_OTHER1: 1, E.CPU_ATTN: 0, E.GPU_OTHER2: 1, E.GPU_MOE: 2, E.H2D_EXPERTS: 3}
    # GPU total 12 over three layers, plus 1 s waiting on the first transfer
    assert simulate(build_target_dag(d, 3, 1)).makespan == 13


def test_draft_dag_hand_schedule():
    d = {E.DRAFT_GPU_STEP: 1.0, E.DRAFT_CPU_ATTN: 2.0, E.DRAFT_GPU_FFN: 0.5}
    assert simulate(build_draft_dag(d, 2, 10, 10)).makespan == 5.0


def test_draft_dag_gpu_only_is_chain():
    d = {E.DRAFT_GPU_STEP: 0.3, E.DRAFT_CPU_ATTN: 2.0, E.DRAFT_GPU_FFN: 0.5}
    dag = build_draft_dag(d, 4, 10, 0)
    assert {n.kind for n in dag.nodes} == {E.DRAFT_GPU_STEP}
    assert simulate(dag).makespan == pytest.approx(1.2)


def test_draft_dag_cpu_path_dominates():
    d = {E.DRAFT_GPU_STEP: 1.0, E.DRAFT_CPU_ATTN: 1.0, E.DRAFT_GPU_FFN: 1.0}
    assert simulate(build_draft_dag(d, 1, 1, 1)).makespan == 2.0


def test_draft_dag_needs_k():
    with pytest.raises(ValueError):
        build_draft_dag({}, 0, 1, 1)


def test_simulate_basic_cases():
    dag = EventDag()
    dag.add(E.GPU_MOE, 1)
    dag.add(E.CPU_ATTN, 2)
    assert simulate(dag).makespan == 2
    dag = EventDag()
    dag.add(E.GPU_MOE, 1)
    dag.add(E.GPU_MOE, 2)
    assert simulate(dag).makespan == 3


def test_simulate_diamond():
    dag = EventDag()
    a = dag.add(E.GPU_OTHER1, 1, resource=Lane.GPU)
    b = dag.add(E.CPU_ATTN, 2, [a], resource=Lane.CPU)
    c = dag.add(E.H2D_EXPERTS, 3, [a], resource=Lane.H2D)
    dag.add(E.GPU_MOE, 1, [b, c], resource=Lane.GPU)
    assert simulate(dag).makespan == 5


def test_cycle_detected():
    dag = EventDag()
    dag.add(E.GPU_MOE, 1, [1])
    dag.add(E.GPU_MOE, 1, [0])
    with pytest.raises(CycleError):
        simulate(dag)


def test_unknown_dependency():
    dag = EventDag()
    dag.add(E.GPU_MOE, 1, [7])
    with pytest.raises(ValueError):
        simulate(dag)


def test_empty_dag():
    s = simulate(EventDag())
    assert s.makespan == 0
    assert emit_trace(s) == []


def test_trace_records(tmp_path):
    dag = EventDag()
    a = dag.add(E.GPU_OTHER1, 1, resource=Lane.GPU)
    dag.add(E.CPU_ATTN, 2, [a], resource=Lane.CPU)
    dag.add(E.H2D_EXPERTS, 3, resource=Lane.H2D)
    out = tmp_path / "t.json"
    events = emit_trace(simulate(dag), out)
    assert len(events) == 3
    assert json.loads(out.read_text()) == events
    assert {e["args"]["lane"] for e in events} == {"GPU", "CPU", "H2D"}
    for e in events:
        assert e["ph"] == "X" and e["dur"] >= 0 and isinstance(e["tid"], int)


# --- iteration ------------------------------------------------------------------

def _ctx(**kw):
    base = dict(b=64, m=2, k=3, s=500.0, gpu_requests=40, cpu_requests=24)
    base.update(kw)
    return IterationContext(**base)


def test_breakdown_labels_and_bounds(a30, mixtral):
    bd = breakdown_for(a30, mixtral, _ctx())
    assert [label for label, _ in bd.rows()] == list(BREAKDOWN_LABELS)
    busy = [bd.cpu_attention, bd.gpu_moe, bd.htod_transfer, bd.gpu_part, bd.cpu_part]
    assert bd.iteration >= max(busy)
    assert bd.iteration <= sum(busy) + bd.others + bd.target_schedule.busy[Lane.GPU] + 1e-12
    assert bd.iteration == pytest.approx(bd.target_model + bd.draft_model + bd.others)


def test_k0_has_no_draft(a30, mixtral):
    bd = breakdown_for(a30, mixtral, _ctx(k=0))
    assert bd.draft_model == bd.gpu_part == bd.cpu_part == 0
    assert bd.iteration == bd.target_model + bd.others


def test_zero_duration_draft(a30, mixtral):
    lat = LatencyModel({E.DRAFT_GPU_STEP: (0, 0), E.DRAFT_CPU_ATTN: (0, 0), E.DRAFT_GPU_FFN: (0, 0),
                        E.OVERHEAD: (0, 0.25)})
    bd = breakdown_for(a30, mixtral, _ctx(), lat)
    assert bd.draft_model == 0
    assert bd.iteration == pytest.approx(bd.target_model + 0.25)


def test_gpu_transfer_attention_runs_on_link(a30, mixtral):
    bd = breakdown_for(a30, mixtral, _ctx(attention_placement=AttentionPlacement.GPU_TRANSFER))
    lanes = {n.resource for n in bd.target_schedule.dag.nodes if n.kind == E.CPU_ATTN}
    assert lanes == {Lane.H2D}


def test_overlapped_target_matches_measured_pattern():
    from make_reference_profile import ground_truth

    truth, (hw, model, _, _, ctx) = ground_truth()
    bd = breakdown_for(hw, model, ctx, truth)
    assert (bd.cpu_attention, bd.gpu_moe, bd.htod_transfer) == pytest.approx((4.29, 3.53, 3.70))
    assert 4.29 <= bd.target_model <= 4.39 * 1.05


def test_iteration_time_trace(tmp_path, a30_apps):
    hw, model, workload, _ = a30_apps
    hyper = Hyperparameters(b=800, m=2, k=3)
    bd = iteration_time(hw, model, workload, hyper, plan_memory(hw, model, workload, 800))
    events = emit_trace(bd, tmp_path / "it.json")
    n = len(bd.target_schedule.dag) + len(bd.draft_schedule.dag)
    assert len(events) == n
    last = max(e["ts"] + e["dur"] for e in events)
    assert last == pytest.approx(bd.iteration * 1e6)


# --- properties ---------------------------------------------------------------

@settings(max_examples=150, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_random_dag_invariants(seed):
    assert schedule_violations(random_dag(np.random.default_rng(seed))) == []


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_chain_makespan_is_sum(seed):
    dag = random_chain(np.random.default_rng(seed))
    assert simulate(dag).makespan == pytest.approx(sum(n.duration for n in dag.nodes), rel=1e-12)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_deterministic(seed):
    dag = random_dag(np.random.default_rng(seed))
    a, b = simulate(dag), simulate(dag)
    assert (a.start, a.end, a.makespan) == (b.start, b.end, b.makespan)


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), layers=st.integers(1, 6))
def test_pipelining_benefit(seed, layers):
    whole, half = pipeline_durations(np.random.default_rng(seed))
    one = simulate(build_target_dag(whole, layers, 1)).makespan
    two = simulate(build_target_dag(half, layers, 2)).makespan
    assert two < one
