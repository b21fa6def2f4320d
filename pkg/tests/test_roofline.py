import csv
import io
import math
from fractions import Fraction

import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from offload_planner.roofline import (
    CSV_COLUMNS,
    CostVector,
    Resource,
    attention_cost_cpu,
    attention_cost_gpu_transfer,
    binding_time,
    classify,
    crossover_batch,
    emit_roofline,
    moe_cost_batch1,
    moe_cost_large_batch,
    operator_points,
    prefer_cpu_attention,
)

from conftest import tiny_hardware, tiny_model


def test_large_batch_cost_at_824(mixtral):
    c = moe_cost_large_batch(mixtral, 824)
    assert c.gpu_ops == pytest.approx(5.8066e11, rel=1e-4)
    assert c.h2d_bytes == pytest.approx(2.8186e9, rel=1e-4)
    assert c.gpu_mem_bytes == c.h2d_bytes
    assert c.cpu_ops == c.cpu_mem_bytes == 0


def test_large_batch_cost_b1(mixtral):
    assert moe_cost_large_batch(mixtral, 1).gpu_ops == pytest.approx(7.0464e8, rel=1e-4)
    with pytest.raises(ValueError):
        moe_cost_large_batch(mixtral, 0)


def test_large_batch_all_active_one_byte():
    m = tiny_model(n_activate=8, bytes_per_elem=1)
    c = moe_cost_large_batch(m, 1)
    assert c.gpu_mem_bytes == c.h2d_bytes == 3 * 8 * m.e


def test_batch1_costs(mixtral):
    full = moe_cost_batch1(mixtral, 1.0)
    assert full.h2d_bytes == full.gpu_mem_bytes
    assert moe_cost_batch1(mixtral, 0.2).h2d_bytes == pytest.approx(1.4093e8, rel=1e-4)
    m = tiny_model(h=10, h_i=10, n_activate=1, bytes_per_elem=2, g=1)
    assert moe_cost_batch1(m, 0.5).h2d_bytes == 300
    for bad in (0.0, 1.5):
        with pytest.raises(ValueError):
            moe_cost_batch1(mixtral, bad)


def test_cpu_attention_mac_view_matches_table_form():
    m = tiny_model(h=64, g=1, bytes_per_elem=1)
    b, s = 3, 10_000
    c = attention_cost_cpu(m, b, s, 1).macs()
    assert c.cpu_ops == pytest.approx(2 * b * s * m.h, rel=2e-4)
    assert c.cpu_mem_bytes == pytest.approx(2 * b * s * m.h, rel=2e-4)


def test_cpu_attention_small_case():
    m = tiny_model(h=4, g=1, bytes_per_elem=2)
    assert attention_cost_cpu(m, 1, 1, 1).cpu_mem_bytes == 32


def test_cpu_attention_linear_in_k_for_long_prefix(mixtral):
    one = attention_cost_cpu(mixtral, 1, 10**6, 1)
    two = attention_cost_cpu(mixtral, 1, 10**6, 2)
    assert two.cpu_ops / one.cpu_ops == pytest.approx(2, rel=1e-5)
    assert two.cpu_mem_bytes == pytest.approx(one.cpu_mem_bytes, rel=1e-5)


def test_gpu_transfer_attention():
    m = tiny_model(h=4, g=2, bytes_per_elem=2)
    c = attention_cost_gpu_transfer(m, 2, 3)
    assert c.h2d_bytes == 48 == c.gpu_mem_bytes
    assert c.cpu_ops == c.cpu_mem_bytes == 0
    m1 = tiny_model(h=4, g=1, bytes_per_elem=2)
    assert attention_cost_gpu_transfer(m1, 2, 3).h2d_bytes == 2 * 2 * 3 * 4 * 2


def test_classify_moe_on_a30(a30, mixtral):
    p = classify(moe_cost_large_batch(mixtral, 824), a30)
    assert p.bound == Resource.H2D
    assert p.utilization == pytest.approx(0.0312, abs=0.0005)
    # independent arithmetic: ops / (bytes / link rate) / peak
    c = moe_cost_large_batch(mixtral, 824)
    assert p.utilization == pytest.approx(c.gpu_ops / (c.h2d_bytes / a30.b_h2d) / a30.p_gpu, rel=1e-12)


def test_classify_cpu_only(a30):
    p = classify(CostVector(cpu_ops=1e9), a30)
    assert p.bound == Resource.CPU_COMPUTE
    assert p.utilization == pytest.approx(1.0)


def test_classify_cpu_attention_memory_bound(a30, mixtral):
    assert classify(attention_cost_cpu(mixtral, 824, 1590, 1), a30).bound == Resource.CPU_MEM


def test_classify_rejects_zero(a30):
    with pytest.raises(ValueError):
        classify(CostVector(), a30)


def test_classify_tie_uses_fixed_order():
    hw = tiny_hardware(p_gpu=1.0, b_gpu=1.0, b_h2d=1.0)
    assert classify(CostVector(gpu_ops=5, gpu_mem_bytes=5, h2d_bytes=5), hw).bound == Resource.GPU_COMPUTE
    assert classify(CostVector(gpu_ops=1, gpu_mem_bytes=5, h2d_bytes=5), hw).bound == Resource.GPU_MEM


def test_crossover_examples():
    assert crossover_batch(tiny_model(n_expert=8, n_activate=2), 0.2) == 20
    assert crossover_batch(tiny_model(n_expert=8, n_activate=8), 1.0) == 1


def _large_batch_wins(model, b, r_miss: Fraction) -> bool:
    # per-token link bytes, compared exactly
    large = Fraction(3 * model.n_expert * model.e * model.bytes_per_elem, b)
    single = 3 * model.n_activate * model.e * model.bytes_per_elem * r_miss
    return large <= single


def test_crossover_brute_force_small_grid():
    for n_expert in (4, 8):
        for n_act in (1, 2):
            m = tiny_model(n_expert=n_expert, n_activate=n_act)
            for tenth in range(1, 11):
                r = Fraction(tenth, 10)
                t = crossover_batch(m, tenth / 10)
                for b in range(1, 101):
                    assert (b >= t) == _large_batch_wins(m, b, r)


def test_emit_roofline_structure(a30, mixtral):
    points = operator_points(a30, mixtral, 824, 1590, 0.2)[:2]
    rows = list(csv.DictReader(io.StringIO(emit_roofline(points, a30))))
    assert len(rows) == 2 + 5
    assert tuple(rows[0]) == CSV_COLUMNS
    assert [r["label"] for r in rows[2:]] == [f"roof:{r.value}" for r in Resource]
    moe = moe_cost_large_batch(mixtral, 824)
    assert float(rows[0]["intensity_flops_per_byte"]) == pytest.approx(moe.gpu_ops / moe.h2d_bytes)


def test_emit_roofline_empty(tmp_path, a30):
    out = tmp_path / "r.csv"
    emit_roofline([], a30, out)
    assert out.read_text().strip() == ",".join(CSV_COLUMNS)


# --- properties ---------------------------------------------------------------

sizes = st.integers(1, 4096)


@settings(max_examples=200, deadline=None)
@given(b=sizes, s=st.integers(1, 8192), k=st.integers(1, 16), factor=st.integers(2, 9))
def test_costs_linear_in_b(mixtral, b, s, k, factor):
    for fn in (lambda bb: moe_cost_large_batch(mixtral, bb).gpu_ops,
               lambda bb: attention_cost_cpu(mixtral, bb, s, k).cpu_ops,
               lambda bb: attention_cost_cpu(mixtral, bb, s, k).cpu_mem_bytes,
               lambda bb: attention_cost_gpu_transfer(mixtral, bb, s).h2d_bytes):
        assert fn(b * factor) == pytest.approx(factor * fn(b), rel=1e-12)


@settings(max_examples=200, deadline=None)
@given(
    p_gpu=st.floats(1e12, 1e15), b_gpu=st.floats(1e11, 5e12), p_cpu=st.floats(1e11, 1e13),
    b_cpu=st.floats(1e10, 1e12), b_h2d=st.floats(1e9, 1e11),
    b=sizes, s=st.integers(1, 8192), k=st.integers(1, 16),
)
def test_utilization_bounded(mixtral, p_gpu, b_gpu, p_cpu, b_cpu, b_h2d, b, s, k):
    assume(b_h2d <= b_gpu)
    hw = tiny_hardware(p_gpu=p_gpu, b_gpu=b_gpu, p_cpu=p_cpu, b_cpu=b_cpu, b_h2d=b_h2d)
    for p in operator_points(hw, mixtral, b, s, 0.2, k):
        assert 0 <= p.utilization <= 1 + 1e-12


@settings(max_examples=300, deadline=None)
@given(
    p_cpu=st.floats(1e11, 1e14), b_cpu=st.floats(1e10, 1e12), b_h2d=st.floats(1e9, 1e11),
    b=sizes, s=st.integers(1, 8192), g=st.sampled_from([1, 2, 4, 8]),
)
def test_cpu_attention_no_slower_when_dram_outruns_link(p_cpu, b_cpu, b_h2d, b, s, g):
    hw = tiny_hardware(p_cpu=p_cpu, b_cpu=b_cpu, b_h2d=b_h2d, b_gpu=2e12, p_gpu=1e15)
    m = tiny_model(h=4096, g=g)
    cpu = attention_cost_cpu(m, b, s, 1)
    gpu = attention_cost_gpu_transfer(m, b, s)
    # The rule compares bandwidths, so it only speaks for memory-bound CPU
    # attention, and the CPU side also reads the one new key (s + 1 vs s).
    assume(prefer_cpu_attention(hw))
    assume(cpu.cpu_ops / hw.p_cpu <= cpu.cpu_mem_bytes / hw.b_cpu)
    assume(hw.b_cpu * s >= hw.b_h2d * (s + 1))
    assert binding_time(cpu, hw) <= binding_time(gpu, hw) * (1 + 1e-12)


@settings(max_examples=100, deadline=None)
@given(n_expert=st.sampled_from([4, 8, 16, 32]), n_act=st.integers(1, 8), tenth=st.integers(1, 10))
def test_crossover_sound(n_expert, n_act, tenth):
    assume(n_act <= n_expert)
    m = tiny_model(n_expert=n_expert, n_activate=n_act)
    t = crossover_batch(m, tenth / 10)
    assert _large_batch_wins(m, t, Fraction(tenth, 10))
    if t > 1:
        assert not _large_batch_wins(m, t - 1, Fraction(tenth, 10))
    assert t == math.ceil(Fraction(n_expert * 10, n_act * tenth))
