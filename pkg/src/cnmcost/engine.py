"""Instruction-accurate simulation, portion extrapolation and system composition.

``simulate`` runs llvcnm programs on a target's compute and memory engines:

* PIPELINE mode models an interleaved multithreaded in-order pipeline. At
  most one instruction issues per cycle; threads are scanned in cyclic index
  order starting after the last issuing thread, and the first free thread
  whose instruction is accepted issues. A thread
  may issue again ``max(min_issue_distance, latency)`` cycles later and its
  instruction completes ``max(stages, latency)`` cycles after issue.
  Transfers on a ``dma`` level are non-blocking: they queue FIFO on the
  earliest free channel and the thread continues until a ``FENCE`` waits for
  its own transfers. Accesses to a ``bank`` level block the thread and the
  level's port for their whole duration.
* VECTOR_PROC mode runs one blocking in-order stream; every instruction
  costs its LUT latency, chosen by the location transition from the previous
  located instruction.

The result is the cycle at which the last instruction or transfer finishes.
"""

from __future__ import annotations

import bisect
import heapq
import math
from dataclasses import dataclass, field
from fractions import Fraction
from functools import lru_cache
from typing import Optional, Sequence, Union

from .cnmir import KernelIr, Subspace
from .codegen import lower_to_llvcnm, tile_plan
from .errors import DeadlockError, SimulationError
from .isa import (DataType, Instruction, Loop, Opcode, Program, build_program, expand,
                  format_instruction)
from .mapping import AccumulationPlan, MappingSet, check_mapping, reduction_plan
from .target import LatencyContext, Mode, TargetSpec, latency_ms, lookup_latency

# decoded instruction kinds
_PIPE, _DMA, _FENCE, _BANK, _NEVER = range(5)


@dataclass(frozen=True)
class EstimatorConfig:
    alpha: float = 0.05
    portion_growth: str = "innermost-first"
    max_portion_iters: int = 32
    value_magnitude: Optional[int] = None

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ValueError(f"alpha must lie in (0, 1), got {self.alpha}")
        if self.portion_growth != "innermost-first":
            raise ValueError(f"unsupported portion growth {self.portion_growth!r}")
        if self.max_portion_iters < 1:
            raise ValueError("max_portion_iters must be >= 1")


# -- simulate --------------------------------------------------------------


def _decoder(t: TargetSpec, magnitude: Optional[int]):
    levels = {m.name: (i, m) for i, m in enumerate(t.memory)}
    pipe = t.pipeline
    ctx = LatencyContext(magnitude=magnitude) if magnitude is not None else None
    cache: dict = {}

    def decode(ins: Instruction):
        if ins in cache:
            return cache[ins]
        lat = lookup_latency(t.lut, ins, ctx)
        if ins.level is not None and ins.level not in levels:
            d = (_NEVER, 0, 0, 0, -1, ins)
        elif ins.opcode is Opcode.FENCE:
            d = (_FENCE, 1, 1, 0, -1, ins)
        elif ins.level is None:
            d = (_PIPE, max(pipe.min_issue_distance, lat), max(pipe.stages, lat), 0, -1, ins)
        else:
            idx, m = levels[ins.level]
            size = ins.size_bytes or ins.dtype.width
            if m.access == "dma":
                d = (_DMA, max(pipe.min_issue_distance, lat), max(pipe.stages, lat),
                     m.dma.transfer_cycles(size), idx, ins)
            elif m.access == "bank":
                dur = max(lat, m.word_access_cycles * math.ceil(size / m.col_bytes))
                d = (_BANK, dur, dur, dur, idx, ins)
            else:
                busy = max(lat, m.word_access_cycles * math.ceil(size / ins.dtype.width))
                d = (_PIPE, max(pipe.min_issue_distance, busy), max(pipe.stages, busy), 0, -1, ins)
        cache[ins] = d
        return d

    return decode


@dataclass(frozen=True)
class IssueEvent:
    cycle: int
    tid: int
    index: int  # position in the thread's dynamic stream
    instruction: Instruction
    transfer: Optional[tuple[int, int]] = None  # (start, end) of a DMA transfer


def _simulate_pipeline(programs: Sequence[Program], t: TargetSpec, magnitude: Optional[int],
                       events: Optional[list] = None) -> int:
    decode = _decoder(t, magnitude)
    streams = [expand(p.tree, decode) for p in programs]
    n = len(streams)
    pcs = [0] * n
    free_at = [0] * n
    pending = [0] * n  # completion of the thread's own outstanding transfers
    chans: dict[int, list[int]] = {}
    inflight: dict[int, list[int]] = {}  # per dma level, completion times (for queue depth)
    port_free: dict[int, int] = {}
    dma_params = {i: m.dma for i, m in enumerate(t.memory) if m.dma is not None}
    shared_queue = {i for i, d in dma_params.items() if d.queue_depth is not None}
    last = 0

    def candidate(tid: int) -> Optional[int]:
        d = streams[tid][pcs[tid]]
        kind = d[0]
        c = free_at[tid]
        if kind == _FENCE:
            return max(c, pending[tid])
        if kind == _BANK:
            return max(c, port_free.get(d[4], 0))
        if kind == _DMA:
            depth = dma_params[d[4]].queue_depth
            q = inflight.get(d[4])
            if depth is not None and q and len(q) >= depth:
                return max(c, sorted(q)[len(q) - depth])
            return c
        if kind == _NEVER:
            return None
        return c

    waiting: list = []  # (candidate, tid)
    ready: list[int] = []  # sorted tids
    rr = 0  # the scan starts after the thread that issued last
    blocked: list[int] = []
    for tid in range(n):
        if streams[tid]:
            c = candidate(tid)
            if c is None:
                blocked.append(tid)
            else:
                waiting.append((c, tid))
    heapq.heapify(waiting)
    remaining = len(waiting)
    now = 0
    while remaining > 0:
        while waiting and waiting[0][0] <= now:
            _, tid = heapq.heappop(waiting)
            bisect.insort(ready, tid)
        if not ready:
            if not waiting:
                break
            now = waiting[0][0]
            continue
        tid = ready.pop(bisect.bisect_left(ready, rr) % len(ready))
        kind, spacing, complete, dur, lvl, _ = streams[tid][pcs[tid]]
        if kind == _BANK or (kind == _DMA and lvl in shared_queue):
            # these depend on other threads, so the queued candidate may be stale
            c = candidate(tid)
            if c > now:
                heapq.heappush(waiting, (c, tid))
                continue
        if kind == _DMA:
            ch = chans.setdefault(lvl, [0] * dma_params[lvl].channels)
            k = min(range(len(ch)), key=lambda i: (ch[i], i))
            start = max(now, ch[k])
            end = start + dur
            ch[k] = end
            q = inflight.setdefault(lvl, [])
            q[:] = [x for x in q if x > now]
            q.append(end)
            pending[tid] = max(pending[tid], end)
            last = max(last, end, now + complete)
            free_at[tid] = now + spacing
            if events is not None:
                events.append(IssueEvent(now, tid, pcs[tid], streams[tid][pcs[tid]][5], (start, end)))
        elif kind == _BANK:
            port_free[lvl] = now + dur
            free_at[tid] = now + dur
            last = max(last, now + dur)
        else:
            free_at[tid] = now + spacing
            last = max(last, now + complete)
        if events is not None and kind != _DMA:
            events.append(IssueEvent(now, tid, pcs[tid], streams[tid][pcs[tid]][5]))
        pcs[tid] += 1
        rr = tid + 1
        if pcs[tid] < len(streams[tid]):
            nc = candidate(tid)
            if nc is None:
                blocked.append(tid)
                remaining -= 1
            else:
                heapq.heappush(waiting, (nc, tid))
        else:
            remaining -= 1
        now += 1
    if blocked:
        state = {
            "cycle": now,
            "threads": [
                {"tid": tid, "pc": pcs[tid], "length": len(streams[tid]),
                 "next": format_instruction(streams[tid][pcs[tid]][5]) if pcs[tid] < len(streams[tid]) else None,
                 "free_at": free_at[tid], "pending_dma": pending[tid]}
                for tid in range(n)],
        }
        raise DeadlockError("no thread can issue its next instruction", state)
    return last


def _transition(prev, loc) -> Optional[str]:
    if prev is None:
        return None
    if prev.bank % 2 != loc.bank % 2:
        return "bank-parity-switch"
    if prev.bank != loc.bank or prev.row != loc.row:
        return "row-switch"
    return "same-row"


def _simulate_vector(program: Program, t: TargetSpec, magnitude: Optional[int]) -> int:
    levels = {m.name: m for m in t.memory}
    cycles = 0
    prev = None
    memo: dict = {}

    def cost(ins: Instruction, transition: Optional[str]) -> int:
        key = (ins, transition)
        if key not in memo:
            lat = lookup_latency(t.lut, ins, LatencyContext(transition, magnitude))
            if ins.level is not None:
                m = levels[ins.level]
                size = ins.size_bytes or ins.dtype.width
                unit = m.col_bytes if m.access == "bank" else ins.dtype.width
                wac = m.word_access_cycles or 0
                if m.access == "dma":
                    lat = max(lat, m.dma.transfer_cycles(size))
                else:
                    lat = max(lat, wac * math.ceil(size / unit))
            memo[key] = lat
        return memo[key]

    def run(nodes, times: int):
        nonlocal cycles, prev
        first = None
        for i in range(times):
            for node in nodes:
                if isinstance(node, Loop):
                    run(node.body, node.trip)
                    continue
                if node.level is not None and node.level not in levels:
                    raise DeadlockError("instruction names an unknown memory level",
                                        {"cycle": cycles, "next": format_instruction(node)})
                if node.location is not None:
                    cycles += cost(node, _transition(prev, node.location))
                    prev = node.location
                else:
                    cycles += cost(node, None)
            if i == 0:
                first = (cycles, prev)
            elif i == 1 and prev == first[1]:
                # the second iteration started and ended in the same state, so
                # every later iteration repeats it exactly
                cycles += (cycles - first[0]) * (times - 2)
                return

    run(program.tree, 1)
    return cycles


@lru_cache(maxsize=4096)
def _simulate_cached(programs: tuple, t: TargetSpec, magnitude: Optional[int]) -> int:
    if t.mode is Mode.VECTOR_PROC:
        if len(programs) != 1:
            raise SimulationError("VECTOR_PROC targets run a single vector stream per unit")
        return _simulate_vector(programs[0], t, magnitude)
    if len(programs) > t.pipeline.hw_threads:
        raise SimulationError(f"{len(programs)} processes exceed the {t.pipeline.hw_threads} hardware threads")
    return _simulate_pipeline(programs, t, magnitude)


def simulate(program: Union[Program, Sequence[Program]], t: TargetSpec, processes: int = 1,
             magnitude: Optional[int] = None) -> int:
    """Cycles to run ``processes`` copies of ``program`` (or one process per
    program in a sequence) on one unit of ``t``."""
    if isinstance(program, Program):
        if processes < 1:
            raise SimulationError("processes must be >= 1")
        programs = (program,) * processes
    else:
        programs = tuple(program)
        if not programs:
            raise SimulationError("no programs to simulate")
    return _simulate_cached(programs, t, magnitude)


def simulate_trace(program: Union[Program, Sequence[Program]], t: TargetSpec, processes: int = 1,
                   magnitude: Optional[int] = None) -> tuple[int, list[IssueEvent]]:
    """Like :func:`simulate` on a pipeline target, also returning every issue event."""
    if t.mode is not Mode.PIPELINE:
        raise SimulationError("issue traces are only recorded for PIPELINE targets")
    programs = (program,) * processes if isinstance(program, Program) else tuple(program)
    events: list[IssueEvent] = []
    return _simulate_pipeline(programs, t, magnitude, events), events


# -- trace sources and portions --------------------------------------------


class KernelSource:
    """A kernel leaf subspace; portions are lowered with the leaf's tiling."""

    def __init__(self, k: KernelIr, t: TargetSpec, s: Subspace, processes: int = 1):
        self.kernel, self.target, self.space, self.processes = k, t, s, processes
        self.plan = tile_plan(k, t, s, processes)
        # (granule, granule count) per dimension
        self.granules = [(1, e) for e in s.extents[:-1]]
        self.granules.append((self.plan.chunk, -(-s.extents[-1] // self.plan.chunk)))

    @property
    def size(self) -> int:
        return self.space.size

    def portion(self, coef: int) -> tuple[int, ...]:
        return grow_portion(self.space.extents, self.granules, coef)

    def portion_size(self, portion) -> int:
        return math.prod(portion)

    def program(self, portion) -> Program:
        return lower_to_llvcnm(self.kernel, self.target, Subspace(portion), self.processes,
                               chunk=self.plan.chunk)


class ProgramSource:
    """A hand-written or ingested program; its dimensions are loop depths."""

    def __init__(self, program: Program, processes: int = 1):
        self.program_full = program
        self.processes = processes
        depth_trips: list[int] = []

        def walk(nodes, depth):
            for node in nodes:
                if isinstance(node, Loop):
                    if len(depth_trips) <= depth:
                        depth_trips.append(1)
                    depth_trips[depth] = max(depth_trips[depth], node.trip)
                    walk(node.body, depth + 1)

        walk(program.tree, 0)
        self.extents = tuple(depth_trips)
        self.granules = [(1, e) for e in self.extents]

    @property
    def size(self) -> int:
        return self.program_full.flat_length

    def portion(self, coef: int) -> tuple[int, ...]:
        if not self.extents:
            return ()
        return grow_portion(self.extents, self.granules, coef)

    def portion_size(self, portion) -> int:
        return self.program(portion).flat_length

    def program(self, portion) -> Program:
        if tuple(portion) == self.extents:
            return self.program_full

        def clip(nodes, depth):
            out = []
            for node in nodes:
                if isinstance(node, Loop):
                    out.append(Loop(min(node.trip, portion[depth]), tuple(clip(node.body, depth + 1))))
                else:
                    out.append(node)
            return out

        return build_program(clip(self.program_full.tree, 0))


def grow_portion(extents: Sequence[int], granules, coef: int) -> tuple[int, ...]:
    """Scale the minimal portion by ``coef`` granules, innermost dimension
    first; a saturated dimension carries the remaining factor outward.

    ``granules`` holds ``(granule, count)`` per dimension with
    ``count = ceil(extent / granule)``.
    """
    if coef < 1:
        raise ValueError("coef must be >= 1")
    n = len(extents)
    out = [min(e, g) for e, (g, _) in zip(extents, granules)]
    for j in range(n - 1, -1, -1):
        g, count = granules[j]
        if coef <= count:
            out[j] = min(extents[j], g * coef)
            return tuple(out)
        out[j] = extents[j]
        coef = -(-coef // count)
    return tuple(out)


def get_portion(s: Subspace, k: Union[KernelIr, Program], coef: int, t: Optional[TargetSpec] = None,
                processes: int = 1) -> Subspace:
    """Portion of ``s`` grown ``coef`` granules; for a Program, the clipped
    per-depth loop extents."""
    if isinstance(k, Program):
        return Subspace(ProgramSource(k, processes).portion(coef) or (1,))
    if t is None:
        raise ValueError("a target is required to tile a kernel")
    return Subspace(KernelSource(k, t, s, processes).portion(coef))


def remaining_space(s: Subspace, portion: Subspace) -> Fraction:
    return Fraction(s.size, portion.size)


@dataclass(frozen=True)
class PortionStats:
    space1: int
    space2: int
    portion1: tuple
    portion2: tuple
    step1: int
    step2: int
    iterations: int
    coefficient: Fraction
    converged: bool

    def to_dict(self) -> dict:
        return {"space1": self.space1, "space2": self.space2, "portion1": list(self.portion1),
                "portion2": list(self.portion2), "step1": self.step1, "step2": self.step2,
                "iterations": self.iterations, "coefficient": str(self.coefficient),
                "converged": self.converged}


def _estimate(src, t: TargetSpec, cfg: EstimatorConfig) -> tuple[int, PortionStats]:
    magnitude = cfg.value_magnitude
    programs: dict = {}

    def run(portion) -> int:
        if portion not in programs:
            programs[portion] = simulate(src.program(portion), t, src.processes, magnitude)
        return programs[portion]

    step1, step2 = -1, 1
    c = 1
    p1 = p2 = None
    it = 0
    while abs(2 - step2 / step1) > cfg.alpha and (p1 is None or p1 != p2) and it < cfg.max_portion_iters:
        p1, p2 = src.portion(c), src.portion(2 * c)
        step1, step2 = run(p1), run(p2)
        c += 1
        it += 1
        if step1 <= 0:
            break
    size2 = src.portion_size(p2)
    size1 = src.portion_size(p1)
    coef = Fraction(src.size, size2)
    converged = p1 == p2 or (step1 > 0 and abs(2 - step2 / step1) <= cfg.alpha) or step2 == 0
    cycles = math.ceil(step2 * coef)
    return cycles, PortionStats(size1, size2, tuple(p1), tuple(p2), step1, step2, it, coef, converged)


def perf_estimate(k: Union[KernelIr, Program], t: TargetSpec, s: Optional[Subspace] = None,
                  cfg: Optional[EstimatorConfig] = None, processes: int = 1) -> tuple[int, PortionStats]:
    """Extrapolated cycles for ``processes`` co-running copies of a leaf.

    Portions of growing size are simulated until doubling the portion
    doubles the cycle count within ``alpha`` (or the portion saturates); the
    last cycle count is then scaled by the remaining-space ratio.
    """
    cfg = cfg or EstimatorConfig()
    if isinstance(k, Program):
        src = ProgramSource(k, processes)
    else:
        if s is None:
            s = Subspace(k.space)
        src = KernelSource(k, t, s, processes)
    return _estimate(src, t, cfg)


# -- system composition ----------------------------------------------------


@dataclass(frozen=True)
class AccumulationCost:
    scope: str  # map id, or "cross:<ids>"
    level: int
    level_name: str
    fan_in: int
    site: str
    elements: int
    bytes: int
    cycles: int

    def to_dict(self) -> dict:
        return dict(vars(self))


@dataclass(frozen=True)
class MapBreakdown:
    map_id: str
    order: int
    leaf: tuple
    leaf_processes: int
    independent_units: int
    compute_cycles: int
    accumulation_cycles: int
    stats: PortionStats

    def to_dict(self) -> dict:
        return {"map_id": self.map_id, "order": self.order, "leaf": list(self.leaf),
                "leaf_processes": self.leaf_processes, "independent_units": self.independent_units,
                "compute_cycles": self.compute_cycles, "accumulation_cycles": self.accumulation_cycles,
                "portion": self.stats.to_dict()}


@dataclass(frozen=True)
class EstimationResult:
    kernel: str
    target: str
    cycles: int
    latency_ms: float
    maps: tuple = ()
    accumulation: tuple = ()
    cross_map_cycles: int = 0
    converged: bool = True
    levels: tuple = field(default=())

    def to_dict(self) -> dict:
        return {
            "kernel": self.kernel,
            "target": self.target,
            "cycles": self.cycles,
            "latency_ms": self.latency_ms,
            "converged": self.converged,
            "cross_map_cycles": self.cross_map_cycles,
            "levels": [dict(x) for x in self.levels],
            "maps": [m.to_dict() for m in self.maps],
            "accumulation": [a.to_dict() for a in self.accumulation],
        }


def leaf_processes(ms_map, t: TargetSpec) -> int:
    """Leaf processes co-simulated on one shared engine."""
    if t.mode is Mode.VECTOR_PROC:
        return 1
    return math.prod(ms_map.tuples[-2])


def accumulation_program(fan_in: int, elements: int, dtype, scratch: str) -> Program:
    """Combine ``fan_in`` partial results of ``elements`` values in a scratch level."""
    jnz = Instruction(Opcode.JNZ, DataType.I32, ("rc",))
    inner = Loop(fan_in - 1, (Instruction(Opcode.LOAD, dtype, ("r1", "r0"), scratch),
                              Instruction(Opcode.RED, dtype, ("r2", "r2", "r1")), jnz))
    body = (inner, Instruction(Opcode.STORE, dtype, ("r0", "r2"), scratch), jnz)
    return build_program([Loop(elements, body)])


def _out_elements(k: KernelIr, extent: Sequence[int]) -> tuple[int, object]:
    """Output values one unit holds for operands that are accumulated."""
    total = 0
    dtype = None
    vars_ = [lp.var for lp in k.loops]
    for op in k.ordered_ops:
        if not k.is_accumulating(op):
            continue
        o = k.operand(op.output)
        dtype = dtype or o.dtype
        for r in k.requests_for(o.id, "write"):
            if r.whole:
                total += math.prod(o.shape)
            else:
                total += math.prod(extent[vars_.index(v)] for v in r.index)
            break
    return total, dtype


def _accumulate_cost(k: KernelIr, t: TargetSpec, fan_in: int, elements: int, dtype,
                     site: str, magnitude) -> int:
    if site != "this-level" or fan_in <= 1 or elements == 0:
        return 0
    scratch = max((m for m in t.memory if m.access == "pipeline"), key=lambda m: m.capacity_bytes)
    prog = accumulation_program(fan_in, elements, dtype, scratch.name)
    return simulate(prog, t, 1, magnitude)


def estimate_system(k: KernelIr, ms: MappingSet, t: TargetSpec,
                    cfg: Optional[EstimatorConfig] = None) -> EstimationResult:
    cfg = cfg or EstimatorConfig()
    if tuple(ms.space) != k.space:
        raise SimulationError(f"mapping space {ms.space} differs from kernel space {k.space}")
    check_mapping(ms, t)
    plan: AccumulationPlan = reduction_plan(ms, k.accumulation_dims(), t)
    maps = []
    accs = []
    total = 0
    converged = True
    for m in ms.ordered:
        procs = leaf_processes(m, t)
        cycles, stats = perf_estimate(k, t, Subspace(m.leaf), cfg, procs)
        converged &= stats.converged
        acc_cycles = 0
        for e in plan.for_map(m.id):
            child = tuple(math.prod(tp[j] for tp in m.tuples[e.level + 1:]) for j in range(m.ndim))
            elements, dtype = _out_elements(k, child)
            c = _accumulate_cost(k, t, e.fan_in, elements, dtype, e.site, cfg.value_magnitude)
            groups = math.prod(m.unit_counts[:e.level + 1]) // e.fan_in
            width = dtype.width if dtype is not None else 0
            accs.append(AccumulationCost(m.id, e.level, e.level_name, e.fan_in, e.site, elements,
                                         groups * e.fan_in * elements * width, c))
            acc_cycles += c
        independent = math.prod(m.unit_counts) // (procs if t.mode is Mode.PIPELINE else 1)
        maps.append(MapBreakdown(m.id, m.order, m.leaf, procs, independent, cycles, acc_cycles, stats))
        total += cycles + acc_cycles
    cross_cycles = 0
    by_id = {m.id: m for m in ms.maps}
    for g in plan.cross:
        elements, dtype = min(_out_elements(k, by_id[i].extent) for i in g.map_ids)
        c = _accumulate_cost(k, t, g.fan_in, elements, dtype, g.site, cfg.value_magnitude)
        width = dtype.width if dtype is not None else 0
        accs.append(AccumulationCost("cross:" + ",".join(g.map_ids), g.level,
                                     t.hierarchy[g.level].name, g.fan_in, g.site, elements,
                                     g.fan_in * elements * width, c))
        cross_cycles += c
    total += cross_cycles
    levels = tuple({"level": h.name, "units": max(m.unit_counts[i] for m in ms.maps),
                    "role": "shared-engine" if (i == len(t.hierarchy) - 1 and t.mode is Mode.PIPELINE)
                    else "independent"} for i, h in enumerate(t.hierarchy))
    return EstimationResult(k.name, t.name, total, latency_ms(total, t), tuple(maps), tuple(accs),
                            cross_cycles, converged, levels)
