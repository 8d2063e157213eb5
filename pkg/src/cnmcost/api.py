"""Shared plumbing for the command line and the HTTP service.

Resolves kernel/target/mapping references, runs single estimations and
mapping-space exploration, and formats the result records.
"""

from __future__ import annotations

import csv
import io
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

from .bench import build_benchmark, parse_bench
from .cnmir import KernelIr, Subspace, parse_kernel
from .codegen import lower_to_llvcnm
from .engine import EstimationResult, EstimatorConfig, estimate_system, leaf_processes
from .errors import CnmError
from .isa import Program
from .mapping import MappingSet, format_map, parse_mapping, sample_mappings, trivial_mapping
from .target import TargetSpec, apply_overrides, load_target, parse_override, preset

CSV_VERSION = "explore-v1"
CSV_COLUMNS = (CSV_VERSION, "map_id", "mapping", "cycles", "latency_ms", "leaf_processes",
               "converged", "accumulation", "status")
DEFAULT_SEED = 0
DEFAULT_LIMIT = 1024


def resolve_kernel(ref: str, text: Optional[str] = None) -> KernelIr:
    """``bench:name:sizes`` or a path to a CNM IR file (``text`` wins if given)."""
    if text is not None:
        return parse_kernel(text)
    if ref.startswith("bench:"):
        return build_benchmark(parse_bench(ref))
    return parse_kernel(Path(ref).read_text())


def resolve_target(ref: str, text: Optional[str] = None,
                   overrides: Iterable[str] = ()) -> TargetSpec:
    """``preset:name`` or a path to a target config, with ``key=value`` overrides applied."""
    if text is not None:
        t = load_target(text)
    elif ref.startswith("preset:"):
        t = preset(ref.split(":", 1)[1])
    else:
        t = load_target(Path(ref).read_text())
    pairs = [parse_override(o) for o in overrides]
    return apply_overrides(t, pairs) if pairs else t


def resolve_mapping(k: KernelIr, t: TargetSpec, path: Optional[str] = None,
                    text: Optional[str] = None) -> MappingSet:
    if text is None and path is not None:
        text = Path(path).read_text()
    if text is None:
        return trivial_mapping(k.space, t)
    return parse_mapping(text)


def make_config(alpha: Optional[float] = None, max_iters: Optional[int] = None,
                magnitude: Optional[int] = None) -> EstimatorConfig:
    kw = {}
    if alpha is not None:
        kw["alpha"] = alpha
    if max_iters is not None:
        kw["max_portion_iters"] = max_iters
    if magnitude is not None:
        kw["value_magnitude"] = magnitude
    try:
        return EstimatorConfig(**kw)
    except ValueError as exc:
        raise CnmError(str(exc)) from None


def estimate(k: KernelIr, t: TargetSpec, ms: Optional[MappingSet] = None,
             cfg: Optional[EstimatorConfig] = None) -> EstimationResult:
    return estimate_system(k, ms or trivial_mapping(k.space, t), t, cfg)


def leaf_program(k: KernelIr, t: TargetSpec, ms: MappingSet) -> Program:
    """llvcnm for one leaf of the first map in precedence order."""
    m = ms.ordered[0]
    return lower_to_llvcnm(k, t, Subspace(m.leaf), leaf_processes(m, t))


def format_record(res: EstimationResult) -> str:
    return json.dumps(res.to_dict(), indent=2, sort_keys=True) + "\n"


# -- exploration -----------------------------------------------------------


@dataclass(frozen=True)
class ExploreRow:
    map_id: str
    mapping: str
    cycles: Optional[int]
    latency_ms: Optional[float]
    leaf_processes: int
    converged: bool
    accumulation: str
    status: str = "ok"

    def to_dict(self) -> dict:
        return dict(vars(self))

    def cells(self) -> list:
        return [CSV_VERSION, self.map_id, self.mapping,
                "" if self.cycles is None else self.cycles,
                "" if self.latency_ms is None else repr(self.latency_ms),
                self.leaf_processes, int(self.converged), self.accumulation, self.status]


def _accumulation_summary(res: EstimationResult) -> str:
    parts = [f"{a.level_name}x{a.fan_in}@{a.site}" for a in res.accumulation]
    return ";".join(parts) or "none"


def evaluate(k: KernelIr, t: TargetSpec, ms: MappingSet, cfg: EstimatorConfig) -> ExploreRow:
    m = ms.maps[0]
    text = " | ".join(format_map(x) for x in ms.maps)
    try:
        res = estimate_system(k, ms, t, cfg)
    except CnmError as exc:
        return ExploreRow(m.id, text, None, None, 0, False, "", f"error: {exc}")
    return ExploreRow(m.id, text, res.cycles, res.latency_ms, res.maps[0].leaf_processes,
                      res.converged, _accumulation_summary(res))


def _evaluate_all(args) -> list[ExploreRow]:
    k, t, sets, cfg = args
    return [evaluate(k, t, ms, cfg) for ms in sets]


def _sort_key(r: ExploreRow):
    # failed rows last; ties broken by id so the order never depends on scheduling
    return (r.cycles is None, r.latency_ms or 0.0, int(r.map_id.lstrip("m") or 0), r.map_id)


def explore(k: KernelIr, t: TargetSpec, limit: int = DEFAULT_LIMIT, seed: int = DEFAULT_SEED,
            cfg: Optional[EstimatorConfig] = None, caps=None, jobs: int = 1) -> list[ExploreRow]:
    """Evaluate up to ``limit`` sampled mappings; rows sorted by latency."""
    cfg = cfg or EstimatorConfig()
    sets = sample_mappings(k.space, t, limit, seed, caps)
    if jobs <= 1 or len(sets) < 2 * jobs:
        rows = _evaluate_all((k, t, sets, cfg))
    else:
        chunks = [sets[i::jobs] for i in range(jobs)]
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = [r for part in pool.map(_evaluate_all, [(k, t, c, cfg) for c in chunks])
                    for r in part]
    return sorted(rows, key=_sort_key)


def rows_to_csv(rows: Sequence[ExploreRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in rows:
        w.writerow(r.cells())
    return buf.getvalue()


def summary_line(rows: Sequence[ExploreRow], seed: int) -> str:
    ok = [r for r in rows if r.cycles is not None]
    if not ok:
        return f"explored {len(rows)} mappings (seed={seed}); none could be estimated"
    best = ok[0]
    return (f"explored {len(rows)} mappings (seed={seed}); best {best.map_id} "
            f"{best.cycles} cycles {best.latency_ms:.6f} ms; failed {len(rows) - len(ok)}")
