import math
from fractions import Fraction

import pytest
from hypothesis import given, settings, strategies as st

from cnmcost.bench import BenchSpec, build_benchmark
from cnmcost.cnmir import Subspace
from cnmcost.codegen import lower_to_llvcnm
from cnmcost.engine import (EstimatorConfig, _simulate_cached, estimate_system, get_portion,
                            grow_portion, perf_estimate, remaining_space, simulate)
from cnmcost.errors import DeadlockError
from cnmcost.isa import DataType, Instruction, Location, Loop, Opcode, build_program, parse_program
from cnmcost.mapping import parse_mapping, trivial_mapping
from cnmcost.target import apply_overrides, from_dict

ADD = Instruction(Opcode.ADD, DataType.I32, ("r0", "r0", "r1"))


def arith(n, op=ADD):
    return build_program([op] * n)


def test_cpi_law_single_process(upmem):
    for n in (2, 3, 10, 257):
        assert simulate(arith(n), upmem) == (n - 1) * 11 + 14


def test_single_instruction(upmem):
    assert simulate(arith(1), upmem) == 14
    assert simulate(build_program([]), upmem) == 0


def test_loops_equal_unrolled(upmem):
    looped = build_program([Loop(50, (ADD, Instruction(Opcode.MUL)))])
    flat = build_program([ADD, Instruction(Opcode.MUL)] * 50)
    assert simulate(looped, upmem) == simulate(flat, upmem)


@pytest.mark.parametrize("procs", [11, 12, 16, 24])
def test_full_pipeline_throughput(upmem, procs):
    per = 40
    total = simulate(arith(per), upmem, processes=procs)
    assert total <= procs * per + 14 + procs


def test_one_issue_per_cycle(upmem):
    # 24 threads of one instruction each cannot finish before 24 issue slots
    assert simulate(arith(1), upmem, processes=24) == 23 + 14


def test_dma_non_blocking_schedule(upmem):
    p = parse_program("LOAD.i32 r0, r1 @mram #64\nADD.i32 r2, r2, r2\nADD.i32 r2, r2, r2")
    # t0: transfer 0..109; t1 queues behind it 109..218; pipeline work overlaps
    assert simulate([p, p], upmem) == 218
    assert simulate(p, upmem) == 109


def test_fence_waits_for_own_transfer(upmem):
    p = parse_program("LOAD.i32 r0, r1 @mram #64\nFENCE.i32\nADD.i32 r2, r2, r2\nADD.i32 r2, r2, r2")
    # thread 1 fences until 218, then adds at 219 and 230
    assert simulate([p, p], upmem) == 230 + 14


def test_dma_serialization_bound(upmem):
    sizes = [8, 64, 256, 2048, 16]
    p = build_program([Instruction(Opcode.LOAD, DataType.I32, ("r0", "r1"), "mram", s) for s in sizes])
    dma = upmem.level("mram").dma
    assert simulate(p, upmem) >= sum(dma.transfer_cycles(s) for s in sizes)


def test_dma_channels_overlap(upmem):
    p = parse_program("LOAD.i32 r0, r1 @mram #2048")
    two = apply_overrides(upmem, [("memory.mram.dma.channels", "2")])
    assert simulate([p, p], two) < simulate([p, p], upmem)


def test_queue_depth_limits_outstanding(upmem):
    p = parse_program("LOAD.i32 r0, r1 @mram #8\nADD.i32 r2, r2, r2")
    shallow = apply_overrides(upmem, [("memory.mram.dma.queue_depth", "1")])
    assert simulate([p] * 4, shallow) >= simulate([p] * 4, upmem)


def _with_bank(t):
    d = t.to_dict()
    d["memory"]["bk"] = {"capacity": 1 << 20, "access": "bank", "word_access_cycles": 5,
                         "row_bytes": 1024, "col_bytes": 32}
    return from_dict(d)


def test_bank_access_blocks_thread_and_port(upmem):
    t = _with_bank(upmem)
    p = parse_program("LOAD.i32 r0, r1 @bk #64\nADD.i32 r2, r2, r2")
    # t0 holds the port 0..10, t1 takes it 10..20, t1's add issues at 20
    assert simulate([p, p], t) == 20 + 14


def test_unknown_level_deadlocks_with_state(upmem):
    p = parse_program("ADD.i32 r0, r0, r0\nLOAD.i32 r0, r1 @nowhere")
    with pytest.raises(DeadlockError) as ei:
        simulate(p, upmem)
    assert ei.value.state["threads"][0]["pc"] == 1


_ops = st.sampled_from([Opcode.ADD, Opcode.MUL, Opcode.SUB, Opcode.DIV])


@settings(max_examples=40, deadline=None)
@given(st.lists(_ops, min_size=1, max_size=30), _ops, st.integers(1, 500))
def test_lut_monotonicity(upmem, ops, bumped, extra):
    p = build_program([Instruction(o) for o in ops])
    e = upmem.lut.entry(bumped, DataType.I32)
    slower = apply_overrides(upmem, [(f"lut.{bumped.value}.i32.*", str(e.default + extra))])
    assert simulate(p, slower) >= simulate(p, upmem)


def test_value_magnitude_selects_bucket(upmem):
    p = arith(10, Instruction(Opcode.MUL))
    assert simulate(p, upmem, magnitude=10) < simulate(p, upmem, magnitude=1 << 20)


# -- vector targets -----------------------------------------------------------


def _ld(bank, row, col=0):
    return Instruction(Opcode.LOAD, DataType.F16, ("r0", "r1"), "bank", None, Location(bank, row, col))


def test_vector_transitions(hbm):
    same = build_program([_ld(0, 0, c) for c in range(8)])
    rows = build_program([_ld(0, r) for r in range(8)])
    parity = build_program([_ld(r % 2, 0) for r in range(8)])
    # first access costs the default, later ones their transition class
    assert simulate(same, hbm) == 4 + 7 * 4
    assert simulate(rows, hbm) == 4 + 7 * 28
    assert simulate(parity, hbm) == 4 + 7 * 6


def test_vector_loop_matches_unrolled(hbm):
    body = (_ld(0, 0), _ld(0, 1), Instruction(Opcode.ADD, DataType.F16))
    looped = build_program([Loop(100, body)])
    assert simulate(looped, hbm) == simulate(build_program(list(body) * 100), hbm)


# -- portions and extrapolation ---------------------------------------------------


def test_grow_portion_innermost_first():
    gran = [(1, 4), (8, 3)]
    assert grow_portion((4, 20), gran, 1) == (1, 8)
    assert grow_portion((4, 20), gran, 2) == (1, 16)
    assert grow_portion((4, 20), gran, 3) == (1, 20)
    assert grow_portion((4, 20), gran, 4) == (2, 20)
    assert grow_portion((4, 20), gran, 100) == (4, 20)


def test_get_portion_minimal_is_one_chunk(upmem):
    k = build_benchmark(BenchSpec("gemv", (12, 32)))
    assert get_portion(Subspace((12, 32)), k, 1, upmem).extents == (1, 32)


def test_remaining_space_is_a_ratio():
    assert remaining_space(Subspace((10, 30)), Subspace((1, 16))) == Fraction(300, 16)


@pytest.mark.parametrize("extents,alpha", [((1, 40), 0.05), ((3, 40), 1e-9), ((5, 700), 1e-9)])
def test_saturation_is_exact(upmem, extents, alpha):
    k = build_benchmark(BenchSpec("gemv", extents))
    s = Subspace(extents)
    est, stats = perf_estimate(k, upmem, s, EstimatorConfig(alpha=alpha))
    assert stats.portion2 == extents
    assert est == simulate(lower_to_llvcnm(k, upmem, s), upmem)


def test_straight_line_program_converges_at_once(upmem):
    est, stats = perf_estimate(arith(20), upmem)
    assert est == simulate(arith(20), upmem)
    assert stats.iterations == 1 and stats.coefficient == 1


@pytest.mark.parametrize("name,extents", [("va", (1 << 12,)), ("relu", (5000,)), ("va", (3000,))])
def test_extrapolation_fidelity_parallel(upmem, name, extents):
    k = build_benchmark(BenchSpec(name, extents))
    s = Subspace(extents)
    est, stats = perf_estimate(k, upmem, s)
    full = simulate(lower_to_llvcnm(k, upmem, s), upmem)
    assert stats.converged
    assert abs(est - full) / full <= 2 * 0.05


def test_unconverged_is_flagged(upmem):
    k = build_benchmark(BenchSpec("va", (1 << 16,)))
    cfg = EstimatorConfig(alpha=1e-9, max_portion_iters=2)
    est, stats = perf_estimate(k, upmem, Subspace((1 << 16,)), cfg, processes=16)
    assert not stats.converged and est > 0


@pytest.mark.parametrize("kw", [dict(alpha=0), dict(alpha=1.5), dict(max_portion_iters=0),
                                dict(portion_growth="outermost-first")])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        EstimatorConfig(**kw)


def test_estimate_is_cached_not_recomputed(upmem):
    k = build_benchmark(BenchSpec("va", (1 << 13,)))
    _simulate_cached.cache_clear()
    a = perf_estimate(k, upmem, Subspace((1 << 13,)))
    b = perf_estimate(k, upmem, Subspace((1 << 13,)))
    assert a == b and _simulate_cached.cache_info().hits > 0


# -- system composition ------------------------------------------------------------


def test_trivial_mapping_equals_leaf_estimate(upmem):
    k = build_benchmark(BenchSpec("gemv", (16, 64)))
    res = estimate_system(k, trivial_mapping(k.space, upmem), upmem)
    assert res.cycles == perf_estimate(k, upmem, Subspace((16, 64)))[0]


def test_m3_composition_matches_manual(upmem):
    k = build_benchmark(BenchSpec("gemv", (192, 512)))
    ms = parse_mapping("space (192,512)\nmap M3 order=3 tuples=[(1,4);(2,4);(8,1);(12,32)]\n")
    res = estimate_system(k, ms, upmem)
    leaf, _ = perf_estimate(k, upmem, Subspace((12, 32)), processes=8)
    (m,) = res.maps
    assert m.leaf_processes == 8 and m.independent_units == 32
    escalated = [a for a in res.accumulation if a.site == "escalate"]
    assert {(a.level_name, a.fan_in) for a in escalated} == {("rank", 4), ("dpu", 4)}
    assert all(a.cycles == 0 for a in escalated)
    assert res.cycles == leaf


def test_thread_level_accumulation_is_costed(upmem):
    k = build_benchmark(BenchSpec("red", (4096,)))
    ms = parse_mapping("space (4096)\nmap a order=1 tuples=[(1);(1);(16);(256)]\n")
    res = estimate_system(k, ms, upmem)
    (acc,) = res.accumulation
    assert acc.level_name == "thread" and acc.fan_in == 16 and acc.site == "this-level"
    assert acc.cycles > 0
    assert res.cycles == res.maps[0].compute_cycles + acc.cycles


def test_breakdown_consistency(upmem):
    k = build_benchmark(BenchSpec("gemv", (512, 1152)))
    ms = parse_mapping("""space (512,1152)
map M1 order=1 tuples=[(1,1);(8,1);(4,1);(10,1152)]
map M2 order=2 tuples=[(1,1);(2,5);(8,1);(12,128)]
map M3 order=3 tuples=[(1,4);(2,4);(8,1);(12,32)]
""")
    res = estimate_system(k, ms, upmem)
    assert [m.map_id for m in res.maps] == ["M1", "M2", "M3"]
    assert res.cycles == sum(m.compute_cycles + m.accumulation_cycles for m in res.maps) + res.cross_map_cycles
    assert any(a.scope == "cross:M2,M3" for a in res.accumulation)


def test_clock_override_halves_latency(upmem):
    k = build_benchmark(BenchSpec("va", (1 << 12,)))
    ms = trivial_mapping(k.space, upmem)
    slow = estimate_system(k, ms, upmem)
    fast = estimate_system(k, ms, apply_overrides(upmem, [("clock_mhz", "700")]))
    assert fast.cycles == slow.cycles
    assert fast.latency_ms == slow.latency_ms / 2


def test_more_threads_is_faster_for_va(upmem):
    k = build_benchmark(BenchSpec("va", (1 << 14,)))
    one = estimate_system(k, parse_mapping("space (16384)\nmap a order=1 tuples=[(1);(1);(1);(16384)]"), upmem)
    many = estimate_system(k, parse_mapping("space (16384)\nmap a order=1 tuples=[(1);(1);(16);(1024)]"), upmem)
    assert many.cycles < one.cycles


def test_result_serializes(upmem):
    k = build_benchmark(BenchSpec("gemv", (8, 8)))
    d = estimate_system(k, trivial_mapping(k.space, upmem), upmem).to_dict()
    assert d["kernel"] == "gemv" and d["maps"][0]["portion"]["converged"] is True
    assert math.isclose(d["latency_ms"], d["cycles"] / 350_000)
