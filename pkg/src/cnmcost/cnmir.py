"""CNM IR: loop-nest kernel descriptions and their canonical text form.

A kernel is a perfect loop nest over declared operands. Each loop is either
``parallel`` or ``reduction``; body ops read operands, temporaries or numeric
constants and write a temporary or an ``out`` operand. An op whose output
operand also appears among its inputs accumulates into that operand.

Text form::

    kernel gemv
    operands:
      A in f32 [512,1152]
      x in f32 [1152]
      y out f32 [512]
    loops:
      i 512 parallel
      j 1152 reduction
    requests:
      read A[i,j]
      read x[j]
      write y[i]
    ops:
      op0: t0 = MUL.f32 A, x
      op1: y = ADD.f32 y, t0
    order:
      op0, op1

An optional ``selectivity <sigma>`` line after the header sets the fraction of
points taking guarded ops (``... when taken``).
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from functools import cached_property
from typing import Optional, Sequence

from .errors import KernelError, ParseError
from .isa import DataType, Opcode

BODY_OPCODES = frozenset(
    {Opcode.ADD, Opcode.SUB, Opcode.MUL, Opcode.DIV, Opcode.MAC, Opcode.AND, Opcode.OR,
     Opcode.SHL, Opcode.SHR, Opcode.CMP, Opcode.COPY, Opcode.MOVI, Opcode.RED}
)
ALL = "*"

_IDENT = re.compile(r"^[A-Za-z_]\w*$")
_NUMBER = re.compile(r"^-?\d+(?:\.\d+)?$")


@dataclass(frozen=True)
class Operand:
    id: str
    shape: tuple[int, ...]
    dtype: DataType
    role: str  # "in" | "out"

    @property
    def nbytes(self) -> int:
        n = self.dtype.width
        for e in self.shape:
            n *= e
        return n


@dataclass(frozen=True)
class LoopSpec:
    var: str
    extent: int
    kind: str  # "parallel" | "reduction"


@dataclass(frozen=True)
class MemRequest:
    """An operand access per iteration point; ``index`` of ``("*",)`` means the
    whole operand is touched from every point."""

    operand: str
    kind: str  # "read" | "write"
    index: tuple[str, ...]

    @property
    def whole(self) -> bool:
        return self.index == (ALL,)


@dataclass(frozen=True)
class BodyOp:
    id: str
    kind: Opcode
    dtype: DataType
    inputs: tuple[str, ...]
    output: str
    guarded: bool = False


@dataclass(frozen=True)
class KernelIr:
    name: str
    operands: tuple[Operand, ...]
    loops: tuple[LoopSpec, ...]
    requests: tuple[MemRequest, ...]
    ops: tuple[BodyOp, ...]
    order: tuple[str, ...]
    selectivity: Optional[float] = None

    def __post_init__(self):
        _validate(self)

    @property
    def space(self) -> tuple[int, ...]:
        return tuple(lp.extent for lp in self.loops)

    @property
    def iterator_kinds(self) -> tuple[str, ...]:
        return tuple(lp.kind for lp in self.loops)

    @property
    def reduction_dims(self) -> frozenset[int]:
        return frozenset(i for i, lp in enumerate(self.loops) if lp.kind == "reduction")

    def operand(self, oid: str) -> Operand:
        for o in self.operands:
            if o.id == oid:
                return o
        raise KernelError(f"unknown operand {oid!r}")

    def op(self, op_id: str) -> BodyOp:
        for o in self.ops:
            if o.id == op_id:
                return o
        raise KernelError(f"unknown op {op_id!r}")

    @property
    def ordered_ops(self) -> tuple[BodyOp, ...]:
        return tuple(self.op(i) for i in self.order)

    def is_accumulating(self, op: BodyOp) -> bool:
        return op.output in self._operand_ids and op.output in op.inputs

    @cached_property
    def _operand_ids(self) -> frozenset[str]:
        return frozenset(o.id for o in self.operands)

    def requests_for(self, oid: str, kind: Optional[str] = None) -> list[MemRequest]:
        return [r for r in self.requests if r.operand == oid and (kind is None or r.kind == kind)]

    def accumulation_dims(self) -> frozenset[int]:
        """Dimensions whose partitioning leaves partial results to combine.

        These are the reduction loops plus, for every operand an op
        accumulates into, the loops missing from that operand's write index.
        """
        dims = set(self.reduction_dims)
        loop_vars = [lp.var for lp in self.loops]
        for op in self.ops:
            if not self.is_accumulating(op):
                continue
            for r in self.requests_for(op.output, "write"):
                if r.whole:
                    dims.update(range(len(loop_vars)))
                else:
                    dims.update(i for i, v in enumerate(loop_vars) if v not in r.index)
        return frozenset(dims)

    @property
    def dtypes(self) -> frozenset[DataType]:
        return frozenset({o.dtype for o in self.operands} | {op.dtype for op in self.ops})


@dataclass(frozen=True)
class Subspace:
    extents: tuple[int, ...]
    origin: tuple[int, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "extents", tuple(int(e) for e in self.extents))
        origin = tuple(int(o) for o in self.origin) or (0,) * len(self.extents)
        object.__setattr__(self, "origin", origin)
        if len(origin) != len(self.extents):
            raise KernelError("subspace origin and extents differ in length")
        if any(e < 1 for e in self.extents):
            raise KernelError(f"subspace extents must be >= 1, got {self.extents}")
        if any(o < 0 for o in origin):
            raise KernelError(f"subspace origin must be >= 0, got {origin}")

    @property
    def size(self) -> int:
        n = 1
        for e in self.extents:
            n *= e
        return n

    def within(self, space: Sequence[int]) -> bool:
        return len(space) == len(self.extents) and all(
            o + e <= s for o, e, s in zip(self.origin, self.extents, space))


def _is_const(tok: str) -> bool:
    return bool(_NUMBER.match(tok))


def _validate(k: KernelIr):
    if not _IDENT.match(k.name or ""):
        raise KernelError(f"bad kernel name {k.name!r}")
    ids = [o.id for o in k.operands]
    if len(set(ids)) != len(ids):
        raise KernelError("duplicate operand id")
    for o in k.operands:
        if not _IDENT.match(o.id):
            raise KernelError(f"bad operand id {o.id!r}")
        if o.role not in ("in", "out"):
            raise KernelError(f"operand {o.id}: role must be in or out")
        if not o.shape or any(e < 1 for e in o.shape):
            raise KernelError(f"operand {o.id}: shape must be positive")
    if not k.loops:
        raise KernelError("kernel needs at least one loop")
    vars_ = [lp.var for lp in k.loops]
    if len(set(vars_)) != len(vars_):
        raise KernelError("duplicate loop variable")
    for lp in k.loops:
        if lp.extent < 1:
            raise KernelError(f"loop {lp.var}: extent must be >= 1")
        if lp.kind not in ("parallel", "reduction"):
            raise KernelError(f"loop {lp.var}: kind must be parallel or reduction")
        if lp.var in ids:
            raise KernelError(f"loop variable {lp.var} shadows an operand")
    by_id = {o.id: o for o in k.operands}
    for r in k.requests:
        if r.operand not in by_id:
            raise KernelError(f"request references undeclared operand {r.operand!r}")
        if r.kind not in ("read", "write"):
            raise KernelError(f"request kind must be read or write, got {r.kind!r}")
        if r.kind == "write" and by_id[r.operand].role != "out":
            raise KernelError(f"write request on input operand {r.operand}")
        if r.whole:
            continue
        if len(r.index) != len(by_id[r.operand].shape):
            raise KernelError(f"request {r.operand}{list(r.index)}: arity differs from shape")
        for v in r.index:
            if v not in vars_:
                raise KernelError(f"request {r.operand}: unknown loop variable {v!r}")

    op_ids = [op.id for op in k.ops]
    if not k.ops:
        raise KernelError("kernel needs at least one op")
    if len(set(op_ids)) != len(op_ids):
        raise KernelError("duplicate op id")
    if sorted(k.order) != sorted(op_ids):
        raise KernelError("order must list every op exactly once")
    defined: set[str] = set()
    for oid in k.order:
        op = next(o for o in k.ops if o.id == oid)
        if op.kind not in BODY_OPCODES:
            raise KernelError(f"op {op.id}: {op.kind.value} is not a body op")
        for src in op.inputs:
            if _is_const(src):
                continue
            if src in by_id:
                o = by_id[src]
                if o.role == "in" and not k.requests_for(src, "read"):
                    raise KernelError(f"op {op.id}: operand {src} has no read request")
                if o.role == "out" and src != op.output and not k.requests_for(src, "read") \
                        and src not in defined:
                    raise KernelError(f"op {op.id}: reads out operand {src} before it is written")
                continue
            if src not in defined:
                raise KernelError(f"op {op.id}: undeclared operand or temporary {src!r}")
        if op.output in by_id:
            if by_id[op.output].role != "out":
                raise KernelError(f"op {op.id}: writes input operand {op.output}")
            if not k.requests_for(op.output, "write"):
                raise KernelError(f"op {op.id}: operand {op.output} has no write request")
        elif not _IDENT.match(op.output) or op.output in vars_:
            raise KernelError(f"op {op.id}: bad output {op.output!r}")
        defined.add(op.output)
        if op.guarded and k.selectivity is None:
            raise KernelError(f"op {op.id} is guarded but the kernel has no selectivity")
    if k.selectivity is not None and not 0.0 <= k.selectivity <= 1.0:
        raise KernelError(f"selectivity must lie in [0,1], got {k.selectivity}")
    if k.reduction_dims and not any(k.is_accumulating(op) for op in k.ops):
        raise KernelError("reduction loop without an op accumulating into an out operand")
    for o in k.operands:
        if o.role == "out" and not any(op.output == o.id for op in k.ops):
            raise KernelError(f"out operand {o.id} is never written")


# -- construction ------------------------------------------------------------


def build_kernel(desc: dict) -> KernelIr:
    """Build a validated KernelIr from a plain dict description.

    Operands may carry an ``index`` list (loop variables or ``"*"``); when the
    dict has no ``requests`` they are inferred from it: a read for every
    ``in`` operand and a write for every ``out`` operand.
    """
    try:
        operands = []
        inferred = []
        for o in desc["operands"]:
            operands.append(Operand(o["id"], tuple(o["shape"]), DataType(o["dtype"]), o.get("role", "in")))
            if "index" in o:
                idx = o["index"]
                idx = (ALL,) if idx == ALL or list(idx) == [ALL] else tuple(idx)
                inferred.append(MemRequest(o["id"], "read" if operands[-1].role == "in" else "write", idx))
        loops = tuple(LoopSpec(lp["var"], int(lp["extent"]), lp.get("kind", "parallel"))
                      for lp in desc["loops"])
        if "requests" in desc:
            requests = tuple(MemRequest(r["operand"], r["kind"],
                                        (ALL,) if r["index"] in (ALL, [ALL]) else tuple(r["index"]))
                             for r in desc["requests"])
        else:
            requests = tuple(inferred)
        ops = tuple(BodyOp(op["id"], Opcode(op["kind"]), DataType(op["dtype"]),
                           tuple(str(x) for x in op["inputs"]), op["output"],
                           bool(op.get("guarded", False)))
                    for op in desc["ops"])
        order = tuple(desc.get("order") or [op.id for op in ops])
    except KeyError as exc:
        raise KernelError(f"kernel description missing field {exc.args[0]!r}") from None
    except (TypeError, ValueError) as exc:
        if isinstance(exc, KernelError):
            raise
        raise KernelError(f"malformed kernel description: {exc}") from None
    sel = desc.get("selectivity")
    return KernelIr(desc.get("name", "kernel"), tuple(operands), loops, requests, ops, order,
                    None if sel is None else float(sel))


def kernel_to_dict(k: KernelIr) -> dict:
    return {
        "name": k.name,
        "operands": [{"id": o.id, "shape": list(o.shape), "dtype": o.dtype.value, "role": o.role}
                     for o in k.operands],
        "loops": [{"var": lp.var, "extent": lp.extent, "kind": lp.kind} for lp in k.loops],
        "requests": [{"operand": r.operand, "kind": r.kind, "index": list(r.index)} for r in k.requests],
        "ops": [{"id": op.id, "kind": op.kind.value, "dtype": op.dtype.value,
                 "inputs": list(op.inputs), "output": op.output, "guarded": op.guarded}
                for op in k.ops],
        "order": list(k.order),
        "selectivity": k.selectivity,
    }


# -- text format -------------------------------------------------------------


def _fmt_float(x: float) -> str:
    return repr(float(x))


def emit_kernel(k: KernelIr) -> str:
    lines = [f"kernel {k.name}"]
    if k.selectivity is not None:
        lines.append(f"selectivity {_fmt_float(k.selectivity)}")
    lines.append("operands:")
    lines += [f"  {o.id} {o.role} {o.dtype.value} [{','.join(map(str, o.shape))}]" for o in k.operands]
    lines.append("loops:")
    lines += [f"  {lp.var} {lp.extent} {lp.kind}" for lp in k.loops]
    lines.append("requests:")
    lines += [f"  {r.kind} {r.operand}[{','.join(r.index)}]" for r in k.requests]
    lines.append("ops:")
    for op in k.ops:
        guard = " when taken" if op.guarded else ""
        lines.append(f"  {op.id}: {op.output} = {op.kind.value}.{op.dtype.value} "
                     f"{', '.join(op.inputs)}{guard}")
    lines.append("order:")
    lines.append("  " + ", ".join(k.order))
    return "\n".join(lines) + "\n"


_OPERAND_LINE = re.compile(r"^(\w+)\s+(in|out)\s+(\w+)\s*\[([\d,\s]+)\]$")
_LOOP_LINE = re.compile(r"^(\w+)\s+(\d+)\s+(parallel|reduction)$")
_REQ_LINE = re.compile(r"^(read|write)\s+(\w+)\s*\[([\w,\s*]*)\]$")
_OP_LINE = re.compile(r"^(\w+)\s*:\s*(\w+)\s*=\s*([A-Za-z]+)\.(\w+)\s+(.+?)(\s+when\s+taken)?$")
_SECTIONS = ("operands", "loops", "requests", "ops", "order")


def parse_kernel(text: str) -> KernelIr:
    name = None
    selectivity = None
    section = None
    seen: list[str] = []
    operands, loops, requests, ops, order = [], [], [], [], []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        col = len(raw) - len(raw.lstrip()) + 1
        try:
            if line.endswith(":") and line[:-1] in _SECTIONS:
                section = line[:-1]
                if section in seen:
                    raise ParseError(f"duplicate section {section}:", lineno, col)
                seen.append(section)
                continue
            if section is None:
                word, _, rest = line.partition(" ")
                if word == "kernel" and rest.strip():
                    name = rest.strip()
                elif word == "selectivity" and rest.strip():
                    selectivity = float(rest)
                else:
                    raise ParseError(f"unexpected line {line!r}", lineno, col)
            elif section == "operands":
                m = _OPERAND_LINE.match(line)
                if not m:
                    raise ParseError("expected '<id> in|out <dtype> [extents]'", lineno, col)
                shape = tuple(int(x) for x in m.group(4).split(","))
                operands.append(Operand(m.group(1), shape, DataType(m.group(3)), m.group(2)))
            elif section == "loops":
                m = _LOOP_LINE.match(line)
                if not m:
                    raise ParseError("expected '<var> <extent> parallel|reduction'", lineno, col)
                loops.append(LoopSpec(m.group(1), int(m.group(2)), m.group(3)))
            elif section == "requests":
                m = _REQ_LINE.match(line)
                if not m:
                    raise ParseError("expected 'read|write <operand>[vars]'", lineno, col)
                idx = tuple(v.strip() for v in m.group(3).split(",") if v.strip())
                requests.append(MemRequest(m.group(2), m.group(1), idx))
            elif section == "ops":
                m = _OP_LINE.match(line)
                if not m:
                    raise ParseError("expected '<id>: <out> = OP.dtype in, ... [when taken]'", lineno, col)
                inputs = tuple(x.strip() for x in m.group(5).split(","))
                ops.append(BodyOp(m.group(1), Opcode(m.group(3).upper()), DataType(m.group(4)),
                                  inputs, m.group(2), bool(m.group(6))))
            else:
                order.extend(x.strip() for x in line.split(",") if x.strip())
        except ValueError as exc:
            if isinstance(exc, (ParseError, KernelError)):
                raise
            raise ParseError(str(exc), lineno, col) from None
    if name is None:
        raise ParseError("missing 'kernel <name>' header", 1, 1)
    for s in ("operands", "loops", "ops"):
        if s not in seen:
            raise ParseError(f"missing section {s}:", 0, 0)
    return KernelIr(name, tuple(operands), tuple(loops), tuple(requests), tuple(ops),
                    tuple(order) if "order" in seen else tuple(op.id for op in ops), selectivity)
