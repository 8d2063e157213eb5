"""Target-system descriptions: hierarchy, engines, memory levels and latency LUTs.

Targets are stored as TOML ``.cfg`` files. Parsing is strict (unknown keys
are errors) and :func:`emit_target` produces a canonical text that
round-trips through :func:`load_target`.
"""

from __future__ import annotations

import copy
import os
import re
from dataclasses import dataclass, field
from enum import Enum
from importlib import resources
from pathlib import Path
from typing import Any, Iterable, Optional

import tomli

from .errors import TargetError
from .isa import DataType, Instruction, Opcode

PRESET_ENV = "CNMCOST_TARGET_PATH"

TRANSITIONS = ("same-row", "row-switch", "bank-parity-switch")
ACCESS_KINDS = ("pipeline", "dma", "bank")

_UNITS = {"": 1, "B": 1, "KiB": 1 << 10, "MiB": 1 << 20, "GiB": 1 << 30,
          "KB": 1 << 10, "MB": 1 << 20, "GB": 1 << 30}
_SIZE_RE = re.compile(r"^\s*(\d+)\s*([KMG]i?B|B)?\s*$")
_MAG_RE = re.compile(r"^mag:(\d+)-(\d+|inf)$")


class Mode(str, Enum):
    PIPELINE = "PIPELINE"
    VECTOR_PROC = "VECTOR_PROC"


def parse_size(value) -> int:
    """Parse a byte count such as ``65536``, ``"64 KiB"`` or ``"64 MiB"``."""
    if isinstance(value, bool):
        raise TargetError(f"bad size {value!r}")
    if isinstance(value, int):
        return value
    m = _SIZE_RE.match(str(value))
    if not m:
        raise TargetError(f"bad size {value!r}; expected e.g. 65536 or '64 KiB'")
    return int(m.group(1)) * _UNITS[m.group(2) or ""]


def format_size(n: int) -> str:
    for unit in ("GiB", "MiB", "KiB"):
        if n >= _UNITS[unit] and n % _UNITS[unit] == 0:
            return f"{n // _UNITS[unit]} {unit}"
    return f"{n} B"


@dataclass(frozen=True)
class HierarchyLevel:
    name: str
    count: int
    accumulate: bool = False


@dataclass(frozen=True)
class PipelineParams:
    stages: int
    min_issue_distance: int
    hw_threads: int


@dataclass(frozen=True)
class DmaParams:
    channels: int
    setup_cycles: int
    bytes_per_cycle: int
    max_transfer_bytes: Optional[int] = None
    queue_depth: Optional[int] = None

    def transfer_cycles(self, size_bytes: int) -> int:
        return self.setup_cycles + -(-size_bytes // self.bytes_per_cycle)


@dataclass(frozen=True)
class MemLevelSpec:
    name: str
    capacity_bytes: int
    access: str
    word_access_cycles: Optional[int] = None
    row_bytes: Optional[int] = None
    col_bytes: Optional[int] = None
    dma: Optional[DmaParams] = None


@dataclass(frozen=True)
class LutEntry:
    """Latencies of one (opcode, dtype) pair.

    ``buckets`` holds half-open value-magnitude ranges ``(lo, hi, cycles)``
    with ``hi=None`` meaning unbounded; ``transitions`` maps a location
    transition class to cycles.
    """

    opcode: Opcode
    dtype: DataType
    default: int
    buckets: tuple = ()
    transitions: tuple = ()

    def contexts(self) -> dict[str, int]:
        out = {"default": self.default}
        for lo, hi, cyc in self.buckets:
            out[f"mag:{lo}-{'inf' if hi is None else hi}"] = cyc
        out.update(self.transitions)
        return out


@dataclass(frozen=True)
class LatencyContext:
    transition: Optional[str] = None
    magnitude: Optional[int] = None


@dataclass(frozen=True)
class LatencyLUT:
    entries: tuple = ()
    _index: dict = field(default=None, compare=False, hash=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple(self.entries))
        object.__setattr__(self, "_index", {(e.opcode, e.dtype): e for e in self.entries})

    def supports(self, opcode: Opcode, dtype: DataType) -> bool:
        return (Opcode(opcode), DataType(dtype)) in self._index

    def entry(self, opcode: Opcode, dtype: DataType) -> LutEntry:
        try:
            return self._index[(Opcode(opcode), DataType(dtype))]
        except KeyError:
            raise TargetError(f"no latency entry for {Opcode(opcode).value}.{DataType(dtype).value}") from None


def lookup_latency(lut: LatencyLUT, ins: Instruction, ctx: Optional[LatencyContext] = None) -> int:
    """Cycles for ``ins``: transition class, then magnitude bucket, then default."""
    e = lut.entry(ins.opcode, ins.dtype)
    if ctx is not None:
        if ctx.transition is not None:
            for name, cyc in e.transitions:
                if name == ctx.transition:
                    return cyc
        if ctx.magnitude is not None:
            for lo, hi, cyc in e.buckets:
                if ctx.magnitude >= lo and (hi is None or ctx.magnitude < hi):
                    return cyc
    return e.default


@dataclass(frozen=True)
class TargetSpec:
    name: str
    clock_mhz: float
    mode: Mode
    hierarchy: tuple
    memory: tuple
    lut: LatencyLUT
    dtypes: tuple
    pipeline: Optional[PipelineParams] = None
    placeholders: tuple = ()

    @property
    def location_sensitive(self) -> bool:
        return self.mode is Mode.VECTOR_PROC

    def level(self, name: str) -> MemLevelSpec:
        for m in self.memory:
            if m.name == name:
                return m
        raise TargetError(f"target {self.name} has no memory level {name!r}")

    def has_level(self, name: str) -> bool:
        return any(m.name == name for m in self.memory)

    def levels_by_access(self, access: str) -> list[MemLevelSpec]:
        return [m for m in self.memory if m.access == access]

    @property
    def unit_counts(self) -> tuple[int, ...]:
        return tuple(h.count for h in self.hierarchy)

    def to_dict(self) -> dict:
        return _to_dict(self)


# -- dict <-> TargetSpec -----------------------------------------------------


def _check_keys(d: dict, allowed: Iterable[str], where: str):
    if not isinstance(d, dict):
        raise TargetError(f"{where}: expected a table")
    extra = set(d) - set(allowed)
    if extra:
        raise TargetError(f"{where}: unknown key(s) {', '.join(sorted(extra))}")


def _req(d: dict, key: str, where: str):
    if key not in d:
        raise TargetError(f"{where}: missing required field {key!r}")
    return d[key]


def _pos_int(v, what: str, minimum: int = 1) -> int:
    if isinstance(v, bool) or not isinstance(v, int) or v < minimum:
        raise TargetError(f"{what} must be an integer >= {minimum}, got {v!r}")
    return v


def from_dict(d: dict) -> TargetSpec:
    _check_keys(d, ("name", "clock_mhz", "mode", "dtypes", "hierarchy", "pipeline",
                    "memory", "lut", "calibration"), "target")
    name = _req(d, "name", "target")
    if not isinstance(name, str) or not name:
        raise TargetError("target name must be a non-empty string")
    clock = _req(d, "clock_mhz", "target")
    if isinstance(clock, bool) or not isinstance(clock, (int, float)) or clock <= 0:
        raise TargetError(f"clock_mhz must be positive, got {clock!r}")
    try:
        mode = Mode(_req(d, "mode", "target"))
    except ValueError:
        raise TargetError(f"mode must be PIPELINE or VECTOR_PROC, got {d['mode']!r}") from None
    try:
        dtypes = tuple(DataType(x) for x in _req(d, "dtypes", "target"))
    except (ValueError, TypeError):
        raise TargetError(f"bad dtypes list {d['dtypes']!r}") from None
    if not dtypes:
        raise TargetError("dtypes must not be empty")

    hier = []
    for i, h in enumerate(_req(d, "hierarchy", "target")):
        where = f"hierarchy[{i}]"
        _check_keys(h, ("name", "count", "accumulate"), where)
        acc = h.get("accumulate", False)
        if not isinstance(acc, bool):
            raise TargetError(f"{where}.accumulate must be a boolean")
        hier.append(HierarchyLevel(str(_req(h, "name", where)),
                                   _pos_int(_req(h, "count", where), f"{where}.count"), acc))
    if not hier:
        raise TargetError("hierarchy must not be empty")
    if len({h.name for h in hier}) != len(hier):
        raise TargetError("hierarchy level names must be unique")

    pipeline = None
    if "pipeline" in d:
        p = d["pipeline"]
        _check_keys(p, ("stages", "min_issue_distance", "hw_threads"), "pipeline")
        pipeline = PipelineParams(
            _pos_int(_req(p, "stages", "pipeline"), "pipeline.stages"),
            _pos_int(_req(p, "min_issue_distance", "pipeline"), "pipeline.min_issue_distance"),
            _pos_int(_req(p, "hw_threads", "pipeline"), "pipeline.hw_threads"),
        )
    if mode is Mode.PIPELINE and pipeline is None:
        raise TargetError("mode PIPELINE requires a [pipeline] block")

    memory = []
    for lname, m in _req(d, "memory", "target").items():
        where = f"memory.{lname}"
        _check_keys(m, ("capacity", "access", "word_access_cycles", "row_bytes",
                        "col_bytes", "dma"), where)
        access = _req(m, "access", where)
        if access not in ACCESS_KINDS:
            raise TargetError(f"{where}.access must be one of {ACCESS_KINDS}, got {access!r}")
        cap = _pos_int(parse_size(_req(m, "capacity", where)), f"{where}.capacity")
        wac = m.get("word_access_cycles")
        if wac is not None:
            _pos_int(wac, f"{where}.word_access_cycles")
        row = m.get("row_bytes")
        col = m.get("col_bytes")
        if row is not None:
            _pos_int(row, f"{where}.row_bytes")
        if col is not None:
            _pos_int(col, f"{where}.col_bytes")
        dma = None
        if "dma" in m:
            q = m["dma"]
            _check_keys(q, ("channels", "setup_cycles", "bytes_per_cycle",
                            "max_transfer_bytes", "queue_depth"), f"{where}.dma")
            dma = DmaParams(
                _pos_int(_req(q, "channels", f"{where}.dma"), f"{where}.dma.channels"),
                _pos_int(_req(q, "setup_cycles", f"{where}.dma"), f"{where}.dma.setup_cycles", 0),
                _pos_int(_req(q, "bytes_per_cycle", f"{where}.dma"), f"{where}.dma.bytes_per_cycle"),
                None if q.get("max_transfer_bytes") is None else _pos_int(q["max_transfer_bytes"], f"{where}.dma.max_transfer_bytes"),
                None if q.get("queue_depth") is None else _pos_int(q["queue_depth"], f"{where}.dma.queue_depth"),
            )
        if access == "dma" and dma is None:
            raise TargetError(f"{where}: access dma requires a dma block")
        if access != "dma" and dma is not None:
            raise TargetError(f"{where}: dma block only allowed with access dma")
        if access in ("pipeline", "bank") and wac is None:
            raise TargetError(f"{where}: access {access} requires word_access_cycles")
        if access == "bank" and (row is None or col is None):
            raise TargetError(f"{where}: access bank requires row_bytes and col_bytes")
        if row is not None and col is not None and row % col:
            raise TargetError(f"{where}: row_bytes must be a multiple of col_bytes")
        memory.append(MemLevelSpec(lname, cap, access, wac, row, col, dma))
    if not memory:
        raise TargetError("at least one memory level is required")

    entries = []
    for opname, per_dtype in _req(d, "lut", "target").items():
        try:
            op = Opcode(opname)
        except ValueError:
            raise TargetError(f"lut: unknown opcode {opname!r}") from None
        if not isinstance(per_dtype, dict):
            raise TargetError(f"lut.{opname}: expected a table")
        for dtname, ctxs in per_dtype.items():
            where = f"lut.{opname}.{dtname}"
            try:
                dt = DataType(dtname)
            except ValueError:
                raise TargetError(f"{where}: unknown dtype") from None
            if dt not in dtypes:
                raise TargetError(f"{where}: dtype not declared in dtypes")
            entries.append(_lut_entry(op, dt, ctxs, where))
    if not entries:
        raise TargetError("lut must not be empty")

    placeholders = ()
    if "calibration" in d:
        c = d["calibration"]
        _check_keys(c, ("placeholder",), "calibration")
        ph = c.get("placeholder", [])
        if not isinstance(ph, list) or not all(isinstance(x, str) for x in ph):
            raise TargetError("calibration.placeholder must be a list of key paths")
        placeholders = tuple(ph)

    return TargetSpec(name, clock, mode, tuple(hier), tuple(memory), LatencyLUT(tuple(entries)),
                      dtypes, pipeline, placeholders)


def _lut_entry(op: Opcode, dt: DataType, ctxs, where: str) -> LutEntry:
    if not isinstance(ctxs, dict):
        raise TargetError(f"{where}: expected a table of context -> cycles")
    if "default" not in ctxs:
        raise TargetError(f"{where}: missing default latency")
    buckets = []
    transitions = []
    for ctx, cyc in ctxs.items():
        cyc = _pos_int(cyc, f"{where}.{ctx}")
        if ctx == "default":
            continue
        if ctx in TRANSITIONS:
            transitions.append((ctx, cyc))
            continue
        m = _MAG_RE.match(ctx)
        if not m:
            raise TargetError(f"{where}: unknown context {ctx!r}")
        lo = int(m.group(1))
        hi = None if m.group(2) == "inf" else int(m.group(2))
        if hi is not None and hi <= lo:
            raise TargetError(f"{where}: empty magnitude bucket {ctx!r}")
        buckets.append((lo, hi, cyc))
    buckets.sort(key=lambda b: b[0])
    for a, b in zip(buckets, buckets[1:]):
        if a[1] is None or a[1] > b[0]:
            raise TargetError(f"{where}: overlapping magnitude buckets")
    order = {n: i for i, n in enumerate(TRANSITIONS)}
    transitions.sort(key=lambda x: order[x[0]])
    return LutEntry(op, dt, ctxs["default"], tuple(buckets), tuple(transitions))


def _to_dict(t: TargetSpec) -> dict:
    d: dict[str, Any] = {
        "name": t.name,
        "clock_mhz": t.clock_mhz,
        "mode": t.mode.value,
        "dtypes": [x.value for x in t.dtypes],
        "hierarchy": [{"name": h.name, "count": h.count, "accumulate": h.accumulate}
                      for h in t.hierarchy],
    }
    if t.pipeline is not None:
        p = t.pipeline
        d["pipeline"] = {"stages": p.stages, "min_issue_distance": p.min_issue_distance,
                         "hw_threads": p.hw_threads}
    mem: dict[str, Any] = {}
    for m in t.memory:
        md: dict[str, Any] = {"capacity": m.capacity_bytes, "access": m.access}
        for key in ("word_access_cycles", "row_bytes", "col_bytes"):
            if getattr(m, key) is not None:
                md[key] = getattr(m, key)
        if m.dma is not None:
            md["dma"] = {k: v for k, v in vars(m.dma).items() if v is not None}
        mem[m.name] = md
    d["memory"] = mem
    lut: dict[str, dict] = {}
    for e in t.lut.entries:
        lut.setdefault(e.opcode.value, {})[e.dtype.value] = e.contexts()
    d["lut"] = lut
    if t.placeholders:
        d["calibration"] = {"placeholder": list(t.placeholders)}
    return d


# -- text ------------------------------------------------------------------


def load_target(text: str) -> TargetSpec:
    try:
        d = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise TargetError(f"config syntax error: {exc}") from None
    return from_dict(d)


def load_target_file(path) -> TargetSpec:
    return load_target(Path(path).read_text(encoding="utf-8"))


def _val(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, float)):
        return repr(v)
    if isinstance(v, list):
        return "[" + ", ".join(_val(x) for x in v) + "]"
    return '"' + str(v).replace("\\", "\\\\").replace('"', '\\"') + '"'


def _key(k: str) -> str:
    return k if re.fullmatch(r"[A-Za-z0-9_-]+", k) else _val(k)


def emit_target(t: TargetSpec) -> str:
    """Canonical config text for ``t``."""
    d = _to_dict(t)
    out = [f"name = {_val(d['name'])}", f"clock_mhz = {_val(d['clock_mhz'])}",
           f"mode = {_val(d['mode'])}", f"dtypes = {_val(d['dtypes'])}"]
    for h in d["hierarchy"]:
        out += ["", "[[hierarchy]]"] + [f"{k} = {_val(v)}" for k, v in h.items()]
    if "pipeline" in d:
        out += ["", "[pipeline]"] + [f"{k} = {_val(v)}" for k, v in d["pipeline"].items()]
    for name, m in d["memory"].items():
        out += ["", f"[memory.{_key(name)}]"]
        for k, v in m.items():
            if k == "dma":
                continue
            out.append(f"{k} = {_val(format_size(v) if k == 'capacity' else v)}")
        if "dma" in m:
            out += ["", f"[memory.{_key(name)}.dma]"] + [f"{k} = {_val(v)}" for k, v in m["dma"].items()]
    for op, per in d["lut"].items():
        out += ["", f"[lut.{op}]"]
        for dt, ctxs in per.items():
            inner = ", ".join(f"{_key(k)} = {v}" for k, v in ctxs.items())
            out.append(f"{dt} = {{ {inner} }}")
    if "calibration" in d:
        out += ["", "[calibration]", "placeholder = ["]
        out += [f"  {_val(k)}," for k in d["calibration"]["placeholder"]]
        out.append("]")
    return "\n".join(out) + "\n"


# -- presets ---------------------------------------------------------------


def list_presets() -> list[str]:
    names = {p.name[:-4] for p in resources.files("cnmcost.presets").iterdir()
             if p.name.endswith(".cfg")}
    extra = os.environ.get(PRESET_ENV)
    if extra and Path(extra).is_dir():
        names |= {p.stem for p in Path(extra).glob("*.cfg")}
    return sorted(names)


def preset_text(name: str) -> str:
    if not re.fullmatch(r"[A-Za-z0-9_-]+", name):
        raise TargetError(f"unknown preset {name!r}")
    extra = os.environ.get(PRESET_ENV)
    if extra:
        candidate = Path(extra) / f"{name}.cfg"
        if candidate.is_file():
            return candidate.read_text(encoding="utf-8")
    res = resources.files("cnmcost.presets") / f"{name}.cfg"
    if not res.is_file():
        raise TargetError(f"unknown preset {name!r}; available: {', '.join(list_presets())}")
    return res.read_text(encoding="utf-8")


def preset(name: str) -> TargetSpec:
    return load_target(preset_text(name))


# -- overrides -------------------------------------------------------------


def _coerce(old, value, key: str):
    if isinstance(old, bool):
        if isinstance(value, bool):
            return value
        s = str(value).strip().lower()
        if s in ("true", "1", "yes"):
            return True
        if s in ("false", "0", "no"):
            return False
        raise TargetError(f"{key}: expected a boolean, got {value!r}")
    if key.endswith(".capacity"):
        return parse_size(value)
    if isinstance(old, int):
        if isinstance(value, bool):
            raise TargetError(f"{key}: expected an integer, got {value!r}")
        if isinstance(value, float):
            if value.is_integer():
                return int(value)
            raise TargetError(f"{key}: expected an integer, got {value!r}")
        try:
            return int(value)
        except (TypeError, ValueError):
            raise TargetError(f"{key}: expected an integer, got {value!r}") from None
    if isinstance(old, float):
        try:
            return float(value)
        except ValueError:
            raise TargetError(f"{key}: expected a number, got {value!r}") from None
    if isinstance(old, list):
        if isinstance(value, (list, tuple)):
            return list(value)
        return [x.strip() for x in str(value).split(",") if x.strip()]
    return value if not isinstance(old, str) else str(value)


def _coerce_number(value, key: str):
    if isinstance(value, bool):
        raise TargetError(f"{key}: expected a number, got {value!r}")
    if isinstance(value, (int, float)):
        return value
    try:
        f = float(value)
    except ValueError:
        raise TargetError(f"{key}: expected a number, got {value!r}") from None
    return int(f) if f.is_integer() and "." not in str(value) else f


def _set_path(d: dict, key: str, value) -> list[str]:
    """Set ``key`` in the raw config dict; returns the concrete paths written."""
    parts = key.split(".")
    if parts[0] == "lut":
        if len(parts) != 4:
            raise TargetError(f"lut overrides take the form lut.OP.dtype.context, got {key!r}")
        _, op, dt, ctx = parts
        try:
            Opcode(op)
            DataType(dt)
        except ValueError:
            raise TargetError(f"cannot resolve override key {key!r}") from None
        entry = d["lut"].setdefault(op, {}).setdefault(dt, {})
        cyc = _coerce(1, value, key)
        if ctx == "*":
            if not entry:
                entry["default"] = cyc
            for c in entry:
                entry[c] = cyc
            return [f"lut.{op}.{dt}.{c}" for c in entry]
        entry[ctx] = cyc
        return [key]
    if parts[0] == "hierarchy" and len(parts) == 3:
        for h in d["hierarchy"]:
            if h["name"] == parts[1]:
                if parts[2] not in h and parts[2] != "accumulate":
                    break
                h[parts[2]] = _coerce(h.get(parts[2], False), value, key)
                return [key]
        raise TargetError(f"cannot resolve override key {key!r}")
    if parts == ["clock_mhz"]:
        d["clock_mhz"] = _coerce_number(value, key)
        return [key]
    node = d
    for p in parts[:-1]:
        if not isinstance(node, dict) or p not in node or not isinstance(node[p], dict):
            raise TargetError(f"cannot resolve override key {key!r}")
        node = node[p]
    last = parts[-1]
    if last not in node:
        optional = {"dma": ("max_transfer_bytes", "queue_depth"),
                    "memory": ("word_access_cycles", "row_bytes", "col_bytes")}
        parent = parts[-2] if len(parts) >= 2 else ""
        grand = parts[-3] if len(parts) >= 3 else ""
        if not (parent == "dma" and last in optional["dma"]) and not (
                grand == "memory" and last in optional["memory"]):
            raise TargetError(f"cannot resolve override key {key!r}")
        node[last] = _coerce(1, value, key)
        return [key]
    if isinstance(node[last], dict):
        raise TargetError(f"override key {key!r} names a table, not a value")
    node[last] = _coerce(node[last], value, key)
    return [key]


def apply_overrides(t: TargetSpec, overrides: Iterable[tuple[str, Any]]) -> TargetSpec:
    """Return a re-validated copy of ``t`` with dotted-key overrides applied."""
    d = copy.deepcopy(_to_dict(t))
    written: set[str] = set()
    for key, value in overrides:
        written.update(_set_path(d, key, value))
    if "calibration" in d:
        d["calibration"]["placeholder"] = [k for k in d["calibration"]["placeholder"]
                                           if k not in written]
    return from_dict(d)


def parse_override(text: str) -> tuple[str, str]:
    key, sep, value = text.partition("=")
    if not sep or not key.strip():
        raise TargetError(f"override must look like key=value, got {text!r}")
    return key.strip(), value.strip()


def latency_ms(cycles: int, t: TargetSpec) -> float:
    return cycles / t.clock_mhz / 1000.0


__all__ = [
    "Mode", "HierarchyLevel", "PipelineParams", "DmaParams", "MemLevelSpec", "LutEntry",
    "LatencyContext", "LatencyLUT", "TargetSpec", "load_target", "load_target_file",
    "emit_target", "preset", "preset_text", "list_presets", "apply_overrides",
    "parse_override", "lookup_latency", "parse_size", "format_size", "latency_ms",
    "from_dict",
]
