"""llvcnm: the target-agnostic virtual assembly consumed by the estimator.

Text grammar (one item per line, ``;`` starts a comment)::

    LOOP <trip>
    ENDLOOP
    <label>:
    OPCODE[.dtype] [operand, operand, ...] [@level] [!bank:row:col] [#bytes]

Operands are opaque tokens (virtual registers ``r<N>``, labels, integer
literals); they never take part in any computation.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from enum import Enum
from functools import cached_property
from typing import Iterator, Optional, Sequence, Union

from .errors import IsaError, ParseError

MAX_TRACE_LENGTH = 2**63 - 1


class DataType(str, Enum):
    I8 = "i8"
    I16 = "i16"
    I32 = "i32"
    I64 = "i64"
    F16 = "f16"
    F32 = "f32"
    F64 = "f64"

    @property
    def width(self) -> int:
        return int(self.value[1:]) // 8

    @property
    def is_float(self) -> bool:
        return self.value.startswith("f")


class Opcode(str, Enum):
    LOAD = "LOAD"
    STORE = "STORE"
    COPY = "COPY"
    MOVI = "MOVI"
    ADD = "ADD"
    SUB = "SUB"
    MUL = "MUL"
    DIV = "DIV"
    MAC = "MAC"
    AND = "AND"
    OR = "OR"
    SHL = "SHL"
    SHR = "SHR"
    CMP = "CMP"
    JUMP = "JUMP"
    JNZ = "JNZ"
    RED = "RED"
    NOP = "NOP"
    FENCE = "FENCE"


ARITHMETIC = frozenset(
    {Opcode.ADD, Opcode.SUB, Opcode.MUL, Opcode.DIV, Opcode.MAC, Opcode.AND,
     Opcode.OR, Opcode.SHL, Opcode.SHR, Opcode.RED}
)
CONTROL = frozenset({Opcode.CMP, Opcode.JUMP, Opcode.JNZ, Opcode.NOP, Opcode.FENCE})
DATA_MOVEMENT = frozenset({Opcode.LOAD, Opcode.STORE, Opcode.COPY, Opcode.MOVI})
SIZED = frozenset({Opcode.LOAD, Opcode.STORE, Opcode.COPY})
NEEDS_LEVEL = frozenset({Opcode.LOAD, Opcode.STORE})

DEFAULT_DTYPE = DataType.I32


@dataclass(frozen=True)
class Location:
    bank: int
    row: int
    col: int

    def __post_init__(self):
        if min(self.bank, self.row, self.col) < 0:
            raise IsaError(f"location fields must be nonnegative: {self}")

    def __str__(self) -> str:
        return f"!{self.bank}:{self.row}:{self.col}"


@dataclass(frozen=True)
class Instruction:
    opcode: Opcode
    dtype: DataType = DEFAULT_DTYPE
    operands: tuple[str, ...] = ()
    level: Optional[str] = None
    size_bytes: Optional[int] = None
    location: Optional[Location] = None

    def __post_init__(self):
        object.__setattr__(self, "opcode", Opcode(self.opcode))
        object.__setattr__(self, "dtype", DataType(self.dtype))
        object.__setattr__(self, "operands", tuple(self.operands))
        if self.opcode in NEEDS_LEVEL and self.level is None:
            raise IsaError(f"{self.opcode.value} requires a memory level")
        if self.size_bytes is not None:
            if self.opcode not in SIZED:
                raise IsaError(f"size only allowed on LOAD/STORE/COPY, not {self.opcode.value}")
            if self.size_bytes <= 0:
                raise IsaError(f"size must be positive, got {self.size_bytes}")

    def __str__(self) -> str:
        return format_instruction(self)


@dataclass(frozen=True)
class LoopBegin:
    trip: int

    def __post_init__(self):
        if self.trip < 1:
            raise IsaError(f"loop trip count must be positive, got {self.trip}")


@dataclass(frozen=True)
class LoopEnd:
    pass


@dataclass(frozen=True)
class Label:
    name: str


Item = Union[Instruction, LoopBegin, LoopEnd, Label]


@dataclass(frozen=True)
class Loop:
    """Tree form of a LOOP ... ENDLOOP block."""

    trip: int
    body: tuple


@dataclass(frozen=True)
class Program:
    items: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "items", tuple(self.items))
        depth = 0
        labels = set()
        for item in self.items:
            if isinstance(item, LoopBegin):
                depth += 1
            elif isinstance(item, LoopEnd):
                depth -= 1
                if depth < 0:
                    raise IsaError("ENDLOOP without matching LOOP")
            elif isinstance(item, Label):
                if item.name in labels:
                    raise IsaError(f"duplicate label {item.name!r}")
                labels.add(item.name)
            elif not isinstance(item, Instruction):
                raise IsaError(f"not a program item: {item!r}")
        if depth:
            raise IsaError("LOOP without matching ENDLOOP")

    @cached_property
    def tree(self) -> tuple:
        """Nested form: tuples of Instruction and Loop (labels dropped)."""
        stack: list[list] = [[]]
        trips: list[int] = []
        for item in self.items:
            if isinstance(item, Instruction):
                stack[-1].append(item)
            elif isinstance(item, LoopBegin):
                stack.append([])
                trips.append(item.trip)
            elif isinstance(item, LoopEnd):
                body = tuple(stack.pop())
                stack[-1].append(Loop(trips.pop(), body))
        return tuple(stack[0])

    def instructions(self) -> list[Instruction]:
        return [i for i in self.items if isinstance(i, Instruction)]

    @cached_property
    def flat_length(self) -> int:
        return _tree_length(self.tree)

    def __len__(self) -> int:
        return len(self.items)


def _tree_length(nodes) -> int:
    total = 0
    for node in nodes:
        if isinstance(node, Loop):
            total += node.trip * _tree_length(node.body)
        else:
            total += 1
    return total


def build_program(nodes: Sequence) -> Program:
    """Build a Program from the nested tree form (Instruction / Loop)."""
    items: list = []

    def walk(seq):
        for node in seq:
            if isinstance(node, Loop):
                items.append(LoopBegin(node.trip))
                walk(node.body)
                items.append(LoopEnd())
            else:
                items.append(node)

    walk(nodes)
    return Program(tuple(items))


# -- text format -------------------------------------------------------------

_OPERAND_RE = re.compile(r"^(?:[A-Za-z_.$][\w.$]*|-?(?:0[xX][0-9a-fA-F]+|\d+))$")
_LABEL_RE = re.compile(r"^([A-Za-z_.$][\w.$]*):$")
_LEVEL_RE = re.compile(r"^@([A-Za-z_]\w*)$")
_LOC_RE = re.compile(r"^!(\d+):(\d+):(\d+)$")
_SIZE_RE = re.compile(r"^#(\d+)$")


def format_instruction(ins: Instruction) -> str:
    text = f"{ins.opcode.value}.{ins.dtype.value}"
    if ins.operands:
        text += " " + ", ".join(ins.operands)
    if ins.level is not None:
        text += f" @{ins.level}"
    if ins.location is not None:
        text += f" {ins.location}"
    if ins.size_bytes is not None:
        text += f" #{ins.size_bytes}"
    return text


def emit_program(p: Program) -> str:
    """Canonical text: two-space indent per loop depth, newline-terminated."""
    lines = []
    depth = 0
    for item in p.items:
        if isinstance(item, LoopEnd):
            depth -= 1
            lines.append("  " * depth + "ENDLOOP")
        elif isinstance(item, LoopBegin):
            lines.append("  " * depth + f"LOOP {item.trip}")
            depth += 1
        elif isinstance(item, Label):
            lines.append("  " * depth + f"{item.name}:")
        else:
            lines.append("  " * depth + format_instruction(item))
    return "".join(line + "\n" for line in lines)


def parse_program(text: str) -> Program:
    items: list = []
    depth = 0
    labels: set[str] = set()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split(";", 1)[0]
        stripped = line.strip()
        if not stripped:
            continue
        col = len(line) - len(line.lstrip()) + 1
        head = stripped.split(None, 1)
        word = head[0]
        if word.upper() == "LOOP":
            if len(head) != 2 or not head[1].strip().isdigit():
                raise ParseError("LOOP expects a positive integer trip count", lineno, col)
            trip = int(head[1])
            if trip < 1:
                raise ParseError("LOOP trip count must be positive", lineno, col)
            items.append(LoopBegin(trip))
            depth += 1
            continue
        if word.upper() == "ENDLOOP":
            if len(head) != 1:
                raise ParseError("unexpected text after ENDLOOP", lineno, col)
            depth -= 1
            if depth < 0:
                raise ParseError("ENDLOOP without matching LOOP", lineno, col)
            items.append(LoopEnd())
            continue
        m = _LABEL_RE.match(stripped)
        if m:
            if m.group(1) in labels:
                raise ParseError(f"duplicate label {m.group(1)!r}", lineno, col)
            labels.add(m.group(1))
            items.append(Label(m.group(1)))
            continue
        items.append(_parse_instruction(line, lineno, col))
    if depth:
        raise ParseError("unbalanced LOOP: missing ENDLOOP", len(text.splitlines()), 1)
    return Program(tuple(items))


def _parse_instruction(line: str, lineno: int, col: int) -> Instruction:
    stripped = line.strip()
    mnemonic, _, rest = stripped.partition(" ")
    op_text, dot, dt_text = mnemonic.partition(".")
    try:
        opcode = Opcode(op_text.upper())
    except ValueError:
        raise ParseError(f"unknown opcode {op_text!r}", lineno, col) from None
    dtype = DEFAULT_DTYPE
    if dot:
        try:
            dtype = DataType(dt_text.lower())
        except ValueError:
            raise ParseError(f"unknown dtype {dt_text!r}", lineno, col + len(op_text) + 1) from None

    # split operands from trailing attributes (@level, !loc, #size)
    rest_col = col + len(mnemonic) + 1
    attr_match = re.search(r"(?:^|\s)[@!#]", rest)
    operand_text = rest[: attr_match.start()] if attr_match else rest
    attr_text = rest[attr_match.start():] if attr_match else ""
    operands: list[str] = []
    if operand_text.strip():
        offset = 0
        for tok in operand_text.split(","):
            tok_col = rest_col + offset + (len(tok) - len(tok.lstrip()))
            offset += len(tok) + 1
            tok = tok.strip()
            if not _OPERAND_RE.match(tok):
                raise ParseError(f"bad operand {tok!r}", lineno, tok_col)
            operands.append(tok)

    level = location = size = None
    attr_col = rest_col + (attr_match.start() if attr_match else 0)
    for tok in attr_text.split():
        tok_col = attr_col + attr_text.find(tok)
        if (m := _LEVEL_RE.match(tok)):
            if level is not None:
                raise ParseError("duplicate @level", lineno, tok_col)
            level = m.group(1)
        elif (m := _LOC_RE.match(tok)):
            if location is not None:
                raise ParseError("duplicate !location", lineno, tok_col)
            location = Location(*(int(g) for g in m.groups()))
        elif (m := _SIZE_RE.match(tok)):
            if size is not None:
                raise ParseError("duplicate #size", lineno, tok_col)
            size = int(m.group(1))
        else:
            raise ParseError(f"bad attribute {tok!r}", lineno, tok_col)
    try:
        return Instruction(opcode, dtype, tuple(operands), level, size, location)
    except IsaError as exc:
        raise ParseError(str(exc), lineno, col) from None


# -- validation ------------------------------------------------------------


def validate_program(p: Program, t) -> list[str]:
    """Check a program against a target; an empty list means valid."""
    diags: list[str] = []
    levels = {m.name: m for m in t.memory}
    supported = set(t.dtypes)
    for n, ins in enumerate(p.instructions()):
        where = f"instruction {n} ({format_instruction(ins)})"
        if ins.dtype not in supported:
            diags.append(f"{where}: dtype {ins.dtype.value} not supported by {t.name}")
        elif not t.lut.supports(ins.opcode, ins.dtype):
            diags.append(f"{where}: {ins.opcode.value}.{ins.dtype.value} has no latency entry on {t.name}")
        if ins.level is not None and ins.level not in levels:
            diags.append(f"{where}: unknown memory level {ins.level!r}")
        if t.location_sensitive:
            lvl = levels.get(ins.level) if ins.level else None
            if lvl is not None and lvl.access == "bank" and ins.location is None:
                diags.append(f"{where}: bank access needs a location on {t.name}")
        elif ins.location is not None:
            diags.append(f"{where}: locations are meaningless on {t.name}")
    return diags


# -- flattening --------------------------------------------------------------


class InstructionTrace:
    """Loop-unrolled instruction sequence of a Program.

    Traces whose full length exceeds ``cap`` are not materialized; they are
    produced lazily on iteration and flagged with ``truncated = True`` so a
    caller can never mistake a capped buffer for the whole trace.
    """

    def __init__(self, program: Program, cap: int):
        self.program = program
        self.length = program.flat_length
        if self.length > MAX_TRACE_LENGTH:
            raise OverflowError(f"trace length {self.length} overflows 64 bits")
        self.cap = cap
        self.truncated = self.length > cap
        self._items = None if self.truncated else list(_unroll(program.tree))

    def __len__(self) -> int:
        return self.length

    def __iter__(self) -> Iterator[Instruction]:
        if self._items is not None:
            return iter(self._items)
        return _unroll(self.program.tree)

    def materialized(self) -> list[Instruction]:
        if self._items is None:
            raise IsaError(f"trace of length {self.length} exceeds cap {self.cap}")
        return self._items


def _unroll(nodes) -> Iterator[Instruction]:
    for node in nodes:
        if isinstance(node, Loop):
            for _ in range(node.trip):
                yield from _unroll(node.body)
        else:
            yield node


def flatten(p: Program, cap: int = 1 << 24) -> InstructionTrace:
    if cap < 1:
        raise IsaError("cap must be positive")
    return InstructionTrace(p, cap)


def expand(nodes, decode) -> list:
    """Unroll a program tree into a list of ``decode(instruction)`` values.

    Each static instruction is decoded once; loop bodies are replicated by
    list repetition, which is what keeps simulation setup cheap.
    """
    out: list = []
    for node in nodes:
        if isinstance(node, Loop):
            out.extend(expand(node.body, decode) * node.trip)
        else:
            out.append(decode(node))
    return out
