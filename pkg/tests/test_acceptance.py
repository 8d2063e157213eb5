"""Acceptance gate: nine criteria, each checked at its stated tolerance.

Run under pytest (a PASS/FAIL line per criterion is printed in the terminal
summary) or directly with ``python tests/test_acceptance.py``.
"""

import itertools
import math
import statistics
import subprocess
import sys
import time
from fractions import Fraction

import pytest

from cnmcost.bench import BENCHMARKS, BenchSpec, build_benchmark
from cnmcost.cnmir import Subspace, emit_kernel, parse_kernel
from cnmcost.codegen import lower_to_llvcnm
from cnmcost.engine import _simulate_cached, perf_estimate, simulate, simulate_trace
from cnmcost.ingest import ingest_target_asm
from cnmcost.isa import DataType, Instruction, Location, Opcode, build_program, emit_program, parse_program
from cnmcost.mapping import (emit_mapping, enumerate_mappings, parse_mapping, partition,
                             sample_mappings)
from cnmcost.target import apply_overrides, emit_target, from_dict, load_target, preset

ALPHA = 0.05


def _arith(n):
    return build_program([Instruction(Opcode.ADD, DataType.I32, ("r0", "r0", "r1"))] * n)


def _timed(fn):
    _simulate_cached.cache_clear()
    t0 = time.perf_counter()
    out = fn()
    return out, time.perf_counter() - t0


def c1_cpi_law():
    t = preset("upmem")
    one, dt1 = _timed(lambda: simulate(_arith(1000), t))
    many, dt16 = _timed(lambda: simulate(_arith(1000), t, processes=16))
    bound = 16 * 1000 + 14 + 16
    ok = one == 999 * 11 + 14 and many <= bound and dt1 < 1 and dt16 < 1
    return ok, f"1 process {one} cycles (want 11003); 16 processes {many} <= {bound}; {dt1 + dt16:.3f}s"


def c2_what_if_cpi():
    t = apply_overrides(preset("upmem"), [("pipeline.stages", "4"), ("pipeline.min_issue_distance", "4")])
    per, procs = 1000, 4
    L = per * procs
    total = simulate(_arith(per), t, processes=procs)
    # one issue every cycle from cycle 0 means the last issue is at L-1
    every_cycle = total == (L - 1) + 4
    return total <= L + 8 and every_cycle, f"{L} instructions in {total} cycles (<= {L + 8}), 1 issue/cycle: {every_cycle}"


def c3_extrapolation():
    t = preset("upmem")
    worst = 0.0
    cases = [("va", (1 << e,)) for e in range(10, 15)] + [("gemv", (n, n)) for n in (64, 96, 128, 192, 256)]
    for name, ext in cases:
        k = build_benchmark(BenchSpec(name, ext))
        s = Subspace(ext)
        est, _ = perf_estimate(k, t, s)
        full = simulate(lower_to_llvcnm(k, t, s), t)
        worst = max(worst, abs(est - full) / full)
    k = build_benchmark(BenchSpec("gemv", (1, 40)))
    sat, stats = perf_estimate(k, t, Subspace((1, 40)))
    exact = sat == simulate(lower_to_llvcnm(k, t, Subspace((1, 40))), t) and stats.portion2 == (1, 40)
    ok = worst <= 2 * ALPHA and exact
    return ok, f"max relative error {worst:.5%} over {len(cases)} leaves (<= {2 * ALPHA:.0%}); saturation exact: {exact}"


def c4_scale_independence():
    t = preset("upmem")
    times = {}
    for e in (13, 17):
        k = build_benchmark(BenchSpec("gemv", (1 << e, 1 << e)))
        s = Subspace((1 << e, 1 << e))
        samples = [_timed(lambda: perf_estimate(k, t, s))[1] for _ in range(5)]
        times[e] = statistics.median(samples)
    ratio = max(times.values()) / min(times.values())
    ok = ratio < 2 and all(v < 0.1 for v in times.values())
    return ok, f"2^13: {times[13] * 1e3:.1f} ms, 2^17: {times[17] * 1e3:.1f} ms, ratio {ratio:.2f} (< 2)"


def c5_dma_schedule():
    t = preset("upmem")
    p = parse_program("LOAD.i32 r0, r1 @mram #64\nADD.i32 r2, r2, r2\nADD.i32 r2, r2, r2")
    total, ev = simulate_trace([p, p], t)
    got = [(e.cycle, e.tid, e.instruction.opcode.value, e.transfer) for e in ev]
    # transfer = 77 setup + 64 B / 2 B per cycle = 109 cycles on the single channel
    hand = [(0, 0, "LOAD", (0, 109)), (1, 1, "LOAD", (109, 218)),
            (11, 0, "ADD", None), (12, 1, "ADD", None), (22, 0, "ADD", None), (23, 1, "ADD", None)]
    dma_ok = got == hand and total == 218
    # a blocking bank level holds both the thread and the port
    d = t.to_dict()
    d["memory"]["bk"] = {"capacity": 1 << 20, "access": "bank", "word_access_cycles": 5,
                         "row_bytes": 1024, "col_bytes": 32}
    tb = from_dict(d)
    q = parse_program("LOAD.i32 r0, r1 @bk #64\nADD.i32 r2, r2, r2")
    total_b, evb = simulate_trace([q, q], tb)
    got_b = [(e.cycle, e.tid, e.instruction.opcode.value) for e in evb]
    hand_b = [(0, 0, "LOAD"), (10, 1, "LOAD"), (11, 0, "ADD"), (20, 1, "ADD")]
    bank_ok = got_b == hand_b and total_b == 34
    return dma_ok and bank_ok, f"dma schedule {'matches' if dma_ok else got}; bank schedule {'matches' if bank_ok else got_b}"


def _distinct_orders(items):
    kinds = list(dict.fromkeys(items))
    counts = [items.count(x) for x in kinds]

    def walk(prefix):
        if len(prefix) == len(items):
            yield list(prefix)
            return
        for i, x in enumerate(kinds):
            if counts[i]:
                counts[i] -= 1
                prefix.append(x)
                yield from walk(prefix)
                prefix.pop()
                counts[i] += 1

    return walk([])


def c6_location_sensitivity():
    t = preset("hbmpim")

    def ld(bank, row):
        return Instruction(Opcode.LOAD, DataType.F16, ("r0", "r1"), "bank", None, Location(bank, row, 0))

    # two rows of one bank: grouped by row or interleaved
    add = Instruction(Opcode.ADD, DataType.F16, ("r2", "r0", "r1"))
    multiset = [ld(0, 0)] * 4 + [ld(0, 1)] * 4 + [add] * 2
    costs = [simulate(build_program(order), t) for order in _distinct_orders(multiset)]
    best, worst = min(costs), max(costs)
    return worst >= 2 * best, f"best {best}, worst {worst} cycles over {len(costs)} orders, ratio {worst / best:.2f} (>= 2)"


_TWO_LEVEL = """
name = "two"
clock_mhz = 100
mode = "PIPELINE"
dtypes = ["i32"]
[[hierarchy]]
name = "node"
count = 64
[[hierarchy]]
name = "lane"
count = 64
[pipeline]
stages = 2
min_issue_distance = 1
hw_threads = 64
[memory.sp]
capacity = "4 KiB"
access = "pipeline"
word_access_cycles = 1
[lut.ADD]
i32 = { default = 1 }
"""


def c7_mapping_algebra():
    n = len(list(enumerate_mappings((12,), load_target(_TWO_LEVEL))))
    brute = sum(1 for c in itertools.product(range(1, 13), repeat=3) if math.prod(c) == 12)
    ms = parse_mapping("space (192,512)\nmap M3 order=3 tuples=[(1,4);(2,4);(8,1);(12,32)]\n")
    (part,) = partition(ms, preset("upmem"))
    seen = set()
    disjoint = True
    for leaf in part.leaves:
        (o0, o1), (e0, e1) = leaf.subspace.origin, leaf.subspace.extents
        cells = {(i, j) for i in range(o0, o0 + e0) for j in range(o1, o1 + e1)}
        disjoint &= not (cells & seen) and (e0, e1) == (12, 32)
        seen |= cells
    tiles = seen == {(i, j) for i in range(192) for j in range(512)}
    ok = n == 18 == brute and len(part.leaves) == 256 and disjoint and tiles
    return ok, f"{n} mappings (brute force {brute}); {len(part.leaves)} leaves, disjoint {disjoint}, tile 192x512 {tiles}"


def c8_multiplier_what_if():
    t = preset("upmem")
    fast = apply_overrides(t, [("lut.MUL.i32.*", "44")])
    muls = build_program([Instruction(Opcode.MUL, DataType.I32, ("r0", "r0", "r1"))] * 500)
    pure = Fraction(simulate(muls, t), simulate(muls, fast))
    k = build_benchmark(BenchSpec("gemm", (8, 8, 64)))
    p = lower_to_llvcnm(k, t, Subspace((8, 8, 64)))
    mixed = simulate(p, t) / simulate(p, fast)
    ok = pure == Fraction(112, 44) and 1 < mixed < 112 / 44
    return ok, f"pure MUL speedup {pure} (want {Fraction(112, 44)}); gemm speedup {mixed:.4f} in (1, {112 / 44:.4f})"


def _cli(*args):
    return subprocess.run([sys.executable, "-m", "cnmcost.cli", *args], capture_output=True, check=True).stdout


def c9_determinism_round_trips():
    runs = [
        ("explore", "--kernel", "bench:gemv:256x512", "--target", "preset:upmem", "--limit", "64", "--seed", "11"),
        ("estimate", "--kernel", "bench:gemm:16x16x64", "--target", "preset:upmem"),
    ]
    identical = all(_cli(*r) == _cli(*r) for r in runs)
    upmem, hbm = preset("upmem"), preset("hbmpim")
    targets = all(load_target(emit_target(x)) == x for x in (upmem, hbm))
    kernels, programs = True, True
    for name in BENCHMARKS:
        ext = {"gemv": (8, 24), "gemm": (4, 4, 8)}.get(name, (40,))
        k = build_benchmark(BenchSpec(name, ext, selectivity=0.5 if name in ("sel", "hst") else None,
                                      bins=8 if name == "hst" else None))
        kernels &= parse_kernel(emit_kernel(k)) == k
        p = lower_to_llvcnm(k, upmem, Subspace(ext), 4)
        programs &= parse_program(emit_program(p)) == p
    vec = lower_to_llvcnm(build_benchmark(BenchSpec("va", (64,), "f16")), hbm, Subspace((64,)))
    asm = ingest_target_asm("move r0, 4\ntop:\nldma r1, r2, 7\nlw r3, r1, 0\nsub r0, r0, 1, nz, top\n")
    programs &= all(parse_program(emit_program(p)) == p for p in (vec, asm))
    maps = [parse_mapping("space (512,1152)\nmap M1 order=1 tuples=[(1,1);(8,1);(4,1);(10,1152)]\n"
                          "map M2 order=2 tuples=[(1,1);(2,5);(8,1);(12,128)] at=(321,1)\n")]
    maps += sample_mappings((4096, 96), upmem, 50, seed=2)
    mappings = all(parse_mapping(emit_mapping(m)) == m for m in maps)
    ok = identical and targets and kernels and programs and mappings
    return ok, (f"cli identical {identical}; round trips: llvcnm {programs}, cnmir {kernels}, "
                f"mapping {mappings}, target {targets}")


CRITERIA = [
    (1, "CPI law", c1_cpi_law),
    (2, "what-if CPI", c2_what_if_cpi),
    (3, "extrapolation oracle", c3_extrapolation),
    (4, "scale-independent estimation time", c4_scale_independence),
    (5, "DMA contention schedule", c5_dma_schedule),
    (6, "location-sensitivity ratio", c6_location_sensitivity),
    (7, "mapping algebra", c7_mapping_algebra),
    (8, "multiplier what-if direction", c8_multiplier_what_if),
    (9, "determinism and round trips", c9_determinism_round_trips),
]


@pytest.mark.parametrize("number,title,check", CRITERIA, ids=[f"criterion_{n}" for n, _, _ in CRITERIA])
def test_acceptance(number, title, check):
    from conftest import ACCEPTANCE

    ok, detail = check()
    ACCEPTANCE[number] = (ok, title, detail)
    print(f"[{'PASS' if ok else 'FAIL'}] {number}. {title}: {detail}")
    assert ok, detail


if __name__ == "__main__":
    failed = 0
    for number, title, check in CRITERIA:
        ok, detail = check()
        failed += not ok
        print(f"[{'PASS' if ok else 'FAIL'}] {number}. {title}: {detail}")
    sys.exit(1 if failed else 0)
