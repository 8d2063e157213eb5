"""Ingestion of a UPMEM-style DPU assembly subset into llvcnm.

Supported lines: labels, ``//`` or ``;`` comments, directives (ignored), and
the mnemonics in :data:`MNEMONICS`. Each instruction line becomes exactly
one llvcnm instruction. Backward branches become ``LOOP``/``ENDLOOP`` when
their trip count is statically known, either from a ``trip=N`` comment on the
branch or label line, or from a ``move`` initialisation, immediate add/sub
steps and the branch condition. Forward branches are modelled as not taken.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Optional

from .errors import IngestError
from .isa import ARITHMETIC, DataType, Instruction, Label, LoopBegin, LoopEnd, Opcode, Program

MAX_TRIP = 1 << 20

_WRAM_LOADS = {"lw": DataType.I32, "lh": DataType.I16, "lhu": DataType.I16, "lb": DataType.I8,
               "lbu": DataType.I8, "ld": DataType.I64}
_WRAM_STORES = {"sw": DataType.I32, "sh": DataType.I16, "sb": DataType.I8, "sd": DataType.I64}
_DMA = {"ldma": Opcode.LOAD, "ldmai": Opcode.LOAD, "sdma": Opcode.STORE}
_ALU = {
    "add": Opcode.ADD, "addc": Opcode.ADD, "mul_step": Opcode.ADD,
    "sub": Opcode.SUB, "subc": Opcode.SUB, "rsub": Opcode.SUB, "rsubc": Opcode.SUB,
    "div_step": Opcode.SUB,
    "and": Opcode.AND, "andn": Opcode.AND, "nand": Opcode.AND,
    "extsb": Opcode.AND, "extub": Opcode.AND, "extsh": Opcode.AND, "extuh": Opcode.AND,
    "or": Opcode.OR, "orn": Opcode.OR, "nor": Opcode.OR, "xor": Opcode.OR, "nxor": Opcode.OR,
    "lsl": Opcode.SHL, "lsl1": Opcode.SHL, "lslx": Opcode.SHL, "lsl_add": Opcode.SHL,
    "rol": Opcode.SHL,
    "lsr": Opcode.SHR, "lsr1": Opcode.SHR, "lsrx": Opcode.SHR, "asr": Opcode.SHR,
    "ror": Opcode.SHR, "lsr_add": Opcode.SHR,
    "cmpb4": Opcode.CMP,
}
_FOUR_OPERANDS = {"mul_step", "div_step", "lsl_add", "lsr_add"}  # trailing shift immediate
_COND_JUMPS = {"jeq", "jneq", "jz", "jnz", "jlt", "jgt", "jle", "jge", "jltu", "jgtu",
               "jleu", "jgeu", "jles", "jges"}
_CONDITIONS = {"z", "nz", "lt", "gt", "le", "ge", "ltu", "gtu", "leu", "geu", "eq", "neq",
               "mi", "pl", "true"}
MNEMONICS = sorted(set(_WRAM_LOADS) | set(_WRAM_STORES) | set(_DMA) | set(_ALU) | _COND_JUMPS
                   | {"mul_*", "move", "nop", "jump"})

_TOKEN = re.compile(r"^(?:[A-Za-z_.$][\w.$]*|-?(?:0[xX][0-9a-fA-F]+|\d+))$")
_LABEL = re.compile(r"^([A-Za-z_.$][\w.$]*):\s*(.*)$")
_TRIP = re.compile(r"trip\s*=\s*(\d+)")
_IMM = re.compile(r"^-?(?:0[xX][0-9a-fA-F]+|\d+)$")


@dataclass
class _Line:
    lineno: int
    mnemonic: str
    operands: list
    ins: Instruction
    target: Optional[str] = None  # branch label
    cond: Optional[str] = None
    trip_hint: Optional[int] = None


@dataclass
class _Label:
    lineno: int
    name: str
    trip_hint: Optional[int] = None


@dataclass
class _Loop:
    start: int  # index of the label item
    end: int  # index of the branch line
    trip: int = 0
    children: list = field(default_factory=list)


def _imm(tok: str) -> Optional[int]:
    return int(tok, 0) if _IMM.match(tok) else None


def _strip_comment(raw: str) -> tuple[str, str]:
    for marker in ("//", ";"):
        if marker in raw:
            i = raw.index(marker)
            return raw[:i], raw[i + len(marker):]
    return raw, ""


def _decode(lineno: int, mnemonic: str, ops: list[str]) -> _Line:
    m = mnemonic.lower()
    for tok in ops:
        if not _TOKEN.match(tok):
            raise IngestError(f"unsupported operand {tok!r}", lineno)
    if m in _DMA:
        if len(ops) != 3 or _imm(ops[2]) is None:
            raise IngestError(f"{m} expects 'wram, mram, imm'", lineno)
        size = (_imm(ops[2]) + 1) * 8
        return _Line(lineno, m, ops, Instruction(_DMA[m], DataType.I64, tuple(ops[:2]), "mram", size))
    if m in _WRAM_LOADS:
        return _Line(lineno, m, ops, Instruction(Opcode.LOAD, _WRAM_LOADS[m], tuple(ops), "wram"))
    if m in _WRAM_STORES:
        return _Line(lineno, m, ops, Instruction(Opcode.STORE, _WRAM_STORES[m], tuple(ops), "wram"))
    if m == "move":
        if len(ops) < 2:
            raise IngestError("move expects a destination and a source", lineno)
        op = Opcode.MOVI if _imm(ops[1]) is not None else Opcode.COPY
        line = _Line(lineno, m, ops, Instruction(op, DataType.I32, tuple(ops[:2])))
        return _fused(line, ops[2:])
    if m == "nop":
        return _Line(lineno, m, ops, Instruction(Opcode.NOP, DataType.I32))
    if m == "jump":
        if len(ops) != 1:
            raise IngestError("jump expects one target", lineno)
        if re.fullmatch(r"r\d+|d\d+|zero", ops[0]):
            raise IngestError(f"irreducible control flow: indirect jump through {ops[0]}", lineno)
        return _Line(lineno, m, ops, Instruction(Opcode.JUMP, DataType.I32, tuple(ops)), target=ops[0],
                     cond="true")
    if m in _COND_JUMPS:
        if len(ops) < 2:
            raise IngestError(f"{m} expects operands and a label", lineno)
        return _Line(lineno, m, ops, Instruction(Opcode.JNZ, DataType.I32, tuple(ops)),
                     target=ops[-1], cond=m[1:])
    if m.startswith("mul_") and m != "mul_step":
        width = DataType.I8
        line = _Line(lineno, m, ops, Instruction(Opcode.MUL, width, tuple(ops[:3])))
        return _fused(line, ops[3:])
    if m in _ALU:
        n = 2 if m.startswith("ext") else 4 if m in _FOUR_OPERANDS else 3
        line = _Line(lineno, m, ops, Instruction(_ALU[m], DataType.I32, tuple(ops[:n])))
        return _fused(line, ops[n:])
    raise IngestError(f"unsupported mnemonic {mnemonic!r}", lineno)


def _fused(line: _Line, tail: list[str]) -> _Line:
    """Handle the optional ``, cond, label`` suffix of ALU instructions."""
    if not tail:
        return line
    if len(tail) != 2 or tail[0].lower() not in _CONDITIONS:
        raise IngestError(f"unsupported operand suffix {', '.join(tail)!r}", line.lineno)
    line.cond = "f" + tail[0].lower()
    line.target = tail[1]
    line.ins = Instruction(line.ins.opcode, line.ins.dtype, line.ins.operands + tuple(tail))
    return line


def _parse_lines(text: str) -> list:
    items: list = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        code, comment = _strip_comment(raw)
        hint = _TRIP.search(comment)
        trip_hint = int(hint.group(1)) if hint else None
        code = code.strip()
        while True:
            m = _LABEL.match(code)
            if not m:
                break
            items.append(_Label(lineno, m.group(1), trip_hint))
            code = m.group(2).strip()
        if not code or code.startswith("."):
            continue
        mnemonic, _, rest = code.partition(" ")
        ops = [o.strip() for o in rest.split(",")] if rest.strip() else []
        line = _decode(lineno, mnemonic, ops)
        line.trip_hint = trip_hint
        items.append(line)
    return items


def _writes(line: _Line, reg: str) -> bool:
    m = line.mnemonic
    if m in _WRAM_STORES or m in _DMA or m in _COND_JUMPS or m in ("jump", "nop"):
        return False
    return bool(line.operands) and line.operands[0] == reg


def _step(line: _Line, reg: str) -> Optional[int]:
    """Immediate increment applied to ``reg`` by ``line`` or None if not affine."""
    ops = line.operands
    if line.mnemonic in ("add", "sub") and len(ops) >= 3 and ops[0] == ops[1] == reg:
        v = _imm(ops[2])
        if v is None:
            return None
        return v if line.mnemonic == "add" else -v
    return None


def _holds(cond: str, a: int, b: int) -> bool:
    mask = (1 << 32) - 1
    ua, ub = a & mask, b & mask
    return {"eq": a == b, "neq": a != b, "z": a == 0, "nz": a != 0, "lt": a < b, "gt": a > b,
            "le": a <= b, "ge": a >= b, "ltu": ua < ub, "gtu": ua > ub, "leu": ua <= ub,
            "geu": ua >= ub, "les": a <= b, "ges": a >= b, "mi": a < 0, "pl": a >= 0,
            "true": True}[cond]


def _resolve_trip(items: list, loop: _Loop, all_loops: list) -> int:
    label = items[loop.start]
    branch = items[loop.end]
    for hint in (branch.trip_hint, label.trip_hint):
        if hint is not None:
            if hint < 1:
                raise IngestError("trip hint must be positive", branch.lineno)
            return hint
    cond = branch.cond
    if cond == "true":
        raise IngestError("irreducible control flow: unconditional backward jump", branch.lineno)
    if cond.startswith("f"):  # fused ALU: tests the ALU result against zero
        reg, bound, cond = branch.operands[0], 0, cond[1:]
    else:
        reg = branch.operands[0]
        bound = None
        if cond in ("z", "nz"):
            bound = 0
        elif len(branch.operands) >= 3:
            bound = _imm(branch.operands[1])
            if bound is None:
                bound = _init_value(items, loop.start, branch.operands[1], branch.lineno)
    nested = [c for c in all_loops if loop.start < c.start and c.end <= loop.end]
    step = 0
    for i in range(loop.start + 1, loop.end + 1):
        it = items[i]
        if not isinstance(it, _Line) or not _writes(it, reg):
            continue
        d = _step(it, reg)
        if d is None or any(c.start < i <= c.end for c in nested):
            raise IngestError(f"irreducible control flow: {reg} is not updated by a constant step",
                              it.lineno)
        step += d
    if step == 0 or cond == "true":
        raise IngestError(f"irreducible control flow: {reg} does not change inside the loop",
                          branch.lineno)
    init = _init_value(items, loop.start, reg, branch.lineno)
    value = init
    for trip in range(1, MAX_TRIP + 1):
        value += step
        if not _holds(cond, value, bound if bound is not None else 0):
            return trip
    raise IngestError("irreducible control flow: loop trip count not statically bounded", branch.lineno)


def _init_value(items: list, before: int, reg: str, lineno: int) -> int:
    for i in range(before - 1, -1, -1):
        it = items[i]
        if isinstance(it, _Line) and _writes(it, reg):
            if it.mnemonic == "move" and _imm(it.operands[1]) is not None:
                return _imm(it.operands[1])
            break
    raise IngestError(f"irreducible control flow: no constant initialisation of {reg}", lineno)


def ingest_target_asm(text: str) -> Program:
    """Convert UPMEM-style assembly to an llvcnm Program."""
    items = _parse_lines(text)
    labels: dict[str, int] = {}
    for i, it in enumerate(items):
        if isinstance(it, _Label):
            if it.name in labels:
                raise IngestError(f"duplicate label {it.name!r}", it.lineno)
            labels[it.name] = i
    loops: list[_Loop] = []
    for i, it in enumerate(items):
        if isinstance(it, _Line) and it.target is not None and it.target in labels \
                and labels[it.target] < i:
            loops.append(_Loop(labels[it.target], i))
        elif isinstance(it, _Line) and it.target is not None and it.target not in labels:
            raise IngestError(f"branch to unknown label {it.target!r}", it.lineno)
    # loops must nest: no partial overlap, no shared header
    for a in loops:
        for b in loops:
            if a is b:
                continue
            if a.start < b.start <= a.end < b.end:
                raise IngestError("irreducible control flow: overlapping loops", items[b.end].lineno)
            if a.start == b.start:
                raise IngestError("irreducible control flow: loops share a header", items[b.end].lineno)
    for lp in loops:
        lp.trip = _resolve_trip(items, lp, loops)
    opens: dict[int, list[_Loop]] = {}
    closes: dict[int, list[_Loop]] = {}
    for lp in loops:
        opens.setdefault(lp.start, []).append(lp)
        closes.setdefault(lp.end, []).append(lp)
    out: list = []
    for i, it in enumerate(items):
        for lp in sorted(opens.get(i, []), key=lambda x: -x.end):
            out.append(LoopBegin(lp.trip))
        out.append(Label(it.name) if isinstance(it, _Label) else it.ins)
        for _ in closes.get(i, []):
            out.append(LoopEnd())
    return Program(tuple(out))


def categories(p: Program) -> dict[str, int]:
    """Static instruction counts per category (dma, scratchpad, arithmetic, other)."""
    counts = {"dma": 0, "scratchpad": 0, "arithmetic": 0, "other": 0}
    for ins in p.instructions():
        if ins.level == "mram":
            counts["dma"] += 1
        elif ins.level == "wram":
            counts["scratchpad"] += 1
        elif ins.opcode in ARITHMETIC:
            counts["arithmetic"] += 1
        else:
            counts["other"] += 1
    return counts
