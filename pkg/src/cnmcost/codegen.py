"""Lowering of CNM IR kernels to per-process llvcnm programs.

Two schemes, picked from the target's memory levels:

* DMA scheme (a ``dma`` level plus a ``pipeline`` scratchpad, UPMEM-like):
  the innermost loop is tiled into chunks whose working set fits the
  per-process scratchpad budget. Each chunk bulk-loads its operands from the
  DMA level, fences, then runs a point loop of scratchpad loads, body ops and
  scratchpad stores; streamed results are bulk-stored afterwards.
* Bank scheme (a ``bank`` level plus a ``pipeline`` register file,
  HBM-PIM-like): points are processed in register-file sized batches of
  located bank loads, body ops and located bank stores.

Every loop body ends with a fused decrement-and-branch ``JNZ.i32``; no other
bookkeeping instructions are emitted, so the arithmetic instruction count of
a program is exactly (body ops) x (points).
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Optional

from .cnmir import KernelIr, Subspace
from .errors import LoweringError
from .isa import (DataType, Instruction, Location, Loop, Opcode, Program, build_program,
                  validate_program)
from .target import MemLevelSpec, TargetSpec

_INT = re.compile(r"^-?\d+$")
_NUM = re.compile(r"^-?\d+(?:\.\d+)?$")

ACC_SPILL_BYTES = 8  # smallest DMA transfer used for accumulator write-back


@dataclass(frozen=True)
class TilePlan:
    """How a leaf subspace is cut into simulation granules.

    ``chunk`` is the innermost-dimension tile (points per DMA chunk or per
    register batch); the innermost extent is ``q * chunk + tail``.
    """

    scheme: str  # "dma" | "bank"
    chunk: int
    inner_extent: int

    @property
    def full_chunks(self) -> int:
        return self.inner_extent // self.chunk

    @property
    def tail(self) -> int:
        return self.inner_extent % self.chunk


@dataclass
class _Roles:
    streamed_reads: list  # operand ids
    streamed_writes: list
    outer_reads: list  # read once per outer point
    resident_reads: list  # '*' inputs, loaded once per leaf
    acc: list  # out operands held in a register (written back per outer point)
    scalar_acc: list  # '*' scalar outputs held for the whole leaf
    rmw: list  # '*' multi-element outputs updated in scratchpad


def _scratch_level(t: TargetSpec) -> MemLevelSpec:
    cands = t.levels_by_access("pipeline")
    if not cands:
        raise LoweringError(f"target {t.name} has no pipeline-access scratch level")
    return max(cands, key=lambda m: m.capacity_bytes)


def _scheme(t: TargetSpec) -> tuple[str, MemLevelSpec, MemLevelSpec]:
    dma = t.levels_by_access("dma")
    if dma:
        return "dma", dma[0], _scratch_level(t)
    bank = t.levels_by_access("bank")
    if bank:
        return "bank", bank[0], _scratch_level(t)
    raise LoweringError(f"target {t.name} has neither a dma nor a bank memory level")


def _roles(k: KernelIr) -> _Roles:
    inner = k.loops[-1].var
    r = _Roles([], [], [], [], [], [], [])
    writers = {op.output for op in k.ops}
    acc_outputs = {op.output for op in k.ops if k.is_accumulating(op)}
    for o in k.operands:
        for req in k.requests_for(o.id):
            if req.kind == "read":
                if o.role == "out" and (o.id in acc_outputs or req.whole or inner not in req.index):
                    continue  # accumulator reads are register or scratchpad reads
                if req.whole:
                    _add(r.resident_reads, o.id)
                elif inner in req.index:
                    _add(r.streamed_reads, o.id)
                else:
                    _add(r.outer_reads, o.id)
            elif o.id in writers:
                if req.whole:
                    size = math.prod(o.shape)
                    _add(r.scalar_acc if size == 1 else r.rmw, o.id)
                elif inner in req.index:
                    _add(r.streamed_writes, o.id)
                else:
                    _add(r.acc, o.id)
    return r


def _add(lst: list, item):
    if item not in lst:
        lst.append(item)


def tile_plan(k: KernelIr, t: TargetSpec, s: Subspace, processes: int = 1) -> TilePlan:
    """Chunk size for leaf ``s`` run by ``processes`` processes sharing the scratchpad."""
    if len(s.extents) != len(k.loops):
        raise LoweringError(f"subspace has {len(s.extents)} dims, kernel {k.name} has {len(k.loops)}")
    if processes < 1:
        raise LoweringError("processes must be >= 1")
    scheme, main, scratch = _scheme(t)
    roles = _roles(k)
    s_in = s.extents[-1]
    if scheme == "dma":
        budget = scratch.capacity_bytes // processes
        fixed = ACC_SPILL_BYTES + sum(k.operand(o).nbytes for o in roles.resident_reads + roles.rmw)
        fixed += sum(k.operand(o).dtype.width for o in roles.outer_reads)
        streamed = roles.streamed_reads + roles.streamed_writes
        per_point = sum(k.operand(o).dtype.width for o in streamed)
        if per_point == 0:
            if fixed > budget:
                raise LoweringError(f"resident working set {fixed} B exceeds the {budget} B "
                                    f"{scratch.name} budget per process")
            return TilePlan(scheme, s_in, s_in)
        chunk = (budget - fixed) // per_point
        if main.dma.max_transfer_bytes is not None:
            widest = max(k.operand(o).dtype.width for o in streamed)
            chunk = min(chunk, main.dma.max_transfer_bytes // widest)
        if chunk < 1:
            raise LoweringError(
                f"tile working set ({fixed} B fixed + {per_point} B per point) exceeds the "
                f"{budget} B {scratch.name} budget per process")
        return TilePlan(scheme, min(chunk, s_in), s_in)
    n_reads = max(1, len(roles.streamed_reads))
    batch = scratch.capacity_bytes // (main.col_bytes * n_reads)
    if batch < 1:
        raise LoweringError(f"{scratch.name} cannot hold one column per streamed operand")
    return TilePlan(scheme, min(batch, s_in), s_in)


class _Regs:
    def __init__(self):
        self.names: dict[str, str] = {}

    def __call__(self, key: str) -> str:
        if key not in self.names:
            self.names[key] = f"r{len(self.names)}"
        return self.names[key]

    def operand(self, tok: str) -> str:
        if _INT.match(tok):
            return tok
        if _NUM.match(tok):
            return self("const:" + tok)
        return self(tok)


def lower_to_llvcnm(k: KernelIr, t: TargetSpec, s: Subspace, processes: int = 1,
                    chunk: Optional[int] = None) -> Program:
    """Per-process llvcnm program for leaf subspace ``s``.

    ``chunk`` overrides the innermost tile size; the estimator uses it to
    lower growing portions of a leaf with the leaf's own tiling.
    """
    unsupported = sorted(d.value for d in k.dtypes if d not in t.dtypes)
    if unsupported:
        raise LoweringError(f"target {t.name} does not support dtype(s) {', '.join(unsupported)}")
    plan = tile_plan(k, t, s, processes)
    if chunk is not None:
        if chunk < 1:
            raise LoweringError("chunk must be >= 1")
        plan = TilePlan(plan.scheme, min(chunk, s.extents[-1]), s.extents[-1])
    if plan.scheme == "dma":
        nodes = _lower_dma(k, t, s, plan)
    else:
        nodes = _lower_bank(k, t, s, plan)
    prog = build_program(nodes)
    diags = validate_program(prog, t)
    if diags:
        raise LoweringError("generated program is invalid for target: " + "; ".join(diags[:5]))
    return prog


def _guard_trip(k: KernelIr, n: int) -> int:
    return math.ceil((k.selectivity or 0.0) * n - 1e-12) if n else 0


def _body_op(k: KernelIr, op, reg: _Regs) -> Instruction:
    return Instruction(op.kind, op.dtype, (reg(op.output),) + tuple(reg.operand(x) for x in op.inputs))


def _jnz() -> Instruction:
    return Instruction(Opcode.JNZ, DataType.I32, ("rc",))


def _dma_pieces(nbytes: int, max_transfer: Optional[int]) -> list[int]:
    if max_transfer is None or nbytes <= max_transfer:
        return [nbytes]
    full, rest = divmod(nbytes, max_transfer)
    return [max_transfer] * full + ([rest] if rest else [])


def _lower_dma(k: KernelIr, t: TargetSpec, s: Subspace, plan: TilePlan) -> list:
    _, main, scratch = _scheme(t)
    roles = _roles(k)
    reg = _Regs()
    dt = {o.id: o.dtype for o in k.operands}
    mt = main.dma.max_transfer_bytes
    M, W = main.name, scratch.name
    guarded = [op for op in k.ordered_ops if op.guarded]
    plain = [op for op in k.ordered_ops if not op.guarded]
    guarded_outs = {op.output for op in guarded}

    def rmw_loads(ops):
        return [Instruction(Opcode.LOAD, dt[o], (reg(o), reg("@" + o)), W)
                for o in roles.rmw if any(op.output == o for op in ops)]

    def rmw_stores(ops):
        return [Instruction(Opcode.STORE, dt[o], (reg("@" + o), reg(o)), W)
                for o in roles.rmw if any(op.output == o for op in ops)]

    def point_body(ops, streamed_reads):
        body = [Instruction(Opcode.LOAD, dt[o], (reg(o), reg("@" + o)), W) for o in streamed_reads]
        body += rmw_loads(ops)
        body += [_body_op(k, op, reg) for op in ops]
        body += [Instruction(Opcode.STORE, dt[o], (reg("@" + o), reg(o)), W)
                 for o in roles.streamed_writes if any(op.output == o for op in ops)]
        body += rmw_stores(ops)
        return body + [_jnz()]

    def chunk_nodes(n: int) -> list:
        out = [Instruction(Opcode.LOAD, dt[o], (reg("@" + o), reg("&" + o)), M, n * dt[o].width)
               for o in roles.streamed_reads]
        if roles.streamed_reads:
            out.append(Instruction(Opcode.FENCE, DataType.I32))
        out.append(Loop(n, tuple(point_body(plain, roles.streamed_reads))))
        g = _guard_trip(k, n)
        if guarded and g:
            # taken-branch work; its inputs were already staged by the point loop
            out.append(Loop(g, tuple(point_body(guarded, []))))
        for o in roles.streamed_writes:
            m = g if o in guarded_outs else n
            if m:
                out.append(Instruction(Opcode.STORE, dt[o], (reg("&" + o), reg("@" + o)), M,
                                       m * dt[o].width))
        return out

    q, tail = divmod(s.extents[-1], plan.chunk)
    inner: list = []
    for o in roles.outer_reads:
        inner.append(Instruction(Opcode.LOAD, dt[o], (reg("@" + o), reg("&" + o)), M,
                                 max(dt[o].width, ACC_SPILL_BYTES)))
    if roles.outer_reads:
        inner.append(Instruction(Opcode.FENCE, DataType.I32))
        inner += [Instruction(Opcode.LOAD, dt[o], (reg(o), reg("@" + o)), W) for o in roles.outer_reads]
    inner += [Instruction(Opcode.MOVI, dt[o], (reg(o), "0")) for o in roles.acc]
    if q:
        inner.append(Loop(q, tuple(chunk_nodes(plan.chunk)) + (_jnz(),)))
    if tail:
        inner += chunk_nodes(tail)
    for o in roles.acc:
        inner.append(Instruction(Opcode.STORE, dt[o], (reg("@" + o), reg(o)), W))
        inner.append(Instruction(Opcode.STORE, dt[o], (reg("&" + o), reg("@" + o)), M,
                                 max(dt[o].width, ACC_SPILL_BYTES)))

    nodes = _wrap_outer(inner, s.extents[:-1])
    prologue: list = []
    for o in roles.resident_reads:
        for piece in _dma_pieces(k.operand(o).nbytes, mt):
            prologue.append(Instruction(Opcode.LOAD, dt[o], (reg("@" + o), reg("&" + o)), M, piece))
    if roles.resident_reads:
        prologue.append(Instruction(Opcode.FENCE, DataType.I32))
    prologue += [Instruction(Opcode.MOVI, dt[o], (reg(o), "0")) for o in roles.scalar_acc]
    epilogue: list = []
    for o in roles.scalar_acc:
        epilogue.append(Instruction(Opcode.STORE, dt[o], (reg("@" + o), reg(o)), W))
        epilogue.append(Instruction(Opcode.STORE, dt[o], (reg("&" + o), reg("@" + o)), M,
                                    max(dt[o].width, ACC_SPILL_BYTES)))
    for o in roles.rmw:
        for piece in _dma_pieces(k.operand(o).nbytes, mt):
            epilogue.append(Instruction(Opcode.STORE, dt[o], (reg("&" + o), reg("@" + o)), M, piece))
    return prologue + nodes + epilogue


def _wrap_outer(inner: list, outer_extents) -> list:
    # trip-1 loops are kept so that every portion of a leaf has the same
    # static instructions as the leaf itself
    nodes = inner
    for e in reversed(outer_extents):
        nodes = [Loop(e, tuple(nodes) + (_jnz(),))]
    return nodes


class _BankLayout:
    """Row-major placement of one process's streamed operands in a bank pair.

    Operands alternate bank parity in declaration order; operands sharing a
    bank are stacked row after row.
    """

    def __init__(self, level: MemLevelSpec, operands: list, points: dict):
        self.cols = level.row_bytes // level.col_bytes
        self.base: dict[str, tuple[int, int]] = {}
        next_row = [0, 0]
        for i, o in enumerate(operands):
            parity = i % 2
            self.base[o] = (parity, next_row[parity])
            next_row[parity] += math.ceil(points[o] / self.cols)

    def loc(self, operand: str, offset: int) -> Location:
        bank, row = self.base[operand]
        return Location(bank, row + offset // self.cols, offset % self.cols)


def _lower_bank(k: KernelIr, t: TargetSpec, s: Subspace, plan: TilePlan) -> list:
    _, bank, grf = _scheme(t)
    roles = _roles(k)
    if roles.rmw or roles.resident_reads or roles.outer_reads:
        raise LoweringError(f"kernel {k.name} needs scratchpad-resident operands, which the "
                            f"bank scheme of target {t.name} does not model")
    reg = _Regs()
    dt = {o.id: o.dtype for o in k.operands}
    B = bank.name
    s_in = s.extents[-1]
    outer_points = math.prod(s.extents[:-1])
    located = [o.id for o in k.operands
               if o.id in roles.streamed_reads + roles.streamed_writes + roles.acc + roles.scalar_acc]
    points = {o: (outer_points if o in roles.acc else 1 if o in roles.scalar_acc else s_in * outer_points)
              for o in located}
    layout = _BankLayout(bank, located, points)
    guarded = [op for op in k.ordered_ops if op.guarded]
    plain = [op for op in k.ordered_ops if not op.guarded]

    def batch(n: int, ops, streamed_reads) -> list:
        out = []
        for o in streamed_reads:
            out += [Instruction(Opcode.LOAD, dt[o], (reg(f"{o}{j}"), reg("&" + o)), B,
                                location=layout.loc(o, j)) for j in range(n)]
        for op in ops:
            out += [Instruction(op.kind, op.dtype, (reg(f"{op.output}{j}" if op.output not in roles.acc + roles.scalar_acc else op.output),)
                                + tuple(_bank_src(x, j, roles, reg) for x in op.inputs))
                    for j in range(n)]
        for o in roles.streamed_writes:
            if any(op.output == o for op in ops):
                out += [Instruction(Opcode.STORE, dt[o], (reg("&" + o), reg(f"{o}{j}")), B,
                                    location=layout.loc(o, j)) for j in range(n)]
        return out

    def group(n: int) -> list:
        out = batch(n, plain, roles.streamed_reads)
        g = _guard_trip(k, n)
        if guarded and g:
            out += batch(g, guarded, [])
        return out

    q, tail = divmod(s_in, plan.chunk)
    inner: list = [Instruction(Opcode.MOVI, dt[o], (reg(o), "0")) for o in roles.acc]
    if q:
        inner.append(Loop(q, tuple(group(plan.chunk)) + (_jnz(),)))
    if tail:
        inner += group(tail)
    for o in roles.acc:
        inner.append(Instruction(Opcode.STORE, dt[o], (reg("&" + o), reg(o)), B, location=layout.loc(o, 0)))
    nodes = _wrap_outer(inner, s.extents[:-1])
    prologue = [Instruction(Opcode.MOVI, dt[o], (reg(o), "0")) for o in roles.scalar_acc]
    epilogue = [Instruction(Opcode.STORE, dt[o], (reg("&" + o), reg(o)), B, location=layout.loc(o, 0))
                for o in roles.scalar_acc]
    return prologue + nodes + epilogue


def _bank_src(tok: str, j: int, roles: _Roles, reg: _Regs) -> str:
    if tok in roles.acc or tok in roles.scalar_acc:
        return reg(tok)
    if _NUM.match(tok):
        return reg.operand(tok)
    return reg(f"{tok}{j}")
