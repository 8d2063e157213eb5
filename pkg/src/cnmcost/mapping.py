"""Hierarchical mappings of iteration spaces onto CNM systems.

A map is a vector of K+1 tuples for a K-level hierarchy: tuple i gives, per
dimension, how many units of level i the map's subspace is split over, and
the last tuple is the per-leaf extent. A mapping set tiles the global space
with one or more maps executed one after another in ``order``.

Text form (dimensions and ``at`` origins are 1-based)::

    space (512,1152)
    map M1 order=1 tuples=[(1,4);(4,2);(4,1);(20,144)]
    map M2 order=2 tuples=[(1,4);(2,4);(8,1);(12,40)] at=(321,1)
"""

from __future__ import annotations

import functools
import itertools
import math
import random
import re
from dataclasses import dataclass
from typing import Iterator, Mapping as TMapping, Optional, Sequence

from .cnmir import Subspace
from .errors import MappingError
from .target import Mode, TargetSpec



@dataclass(frozen=True)
class Map:
    id: str
    order: int
    tuples: tuple[tuple[int, ...], ...]
    at: Optional[tuple[int, ...]] = None  # 0-based origin; None = auto placement

    def __post_init__(self):
        object.__setattr__(self, "tuples", tuple(tuple(int(x) for x in tp) for tp in self.tuples))
        if self.at is not None:
            object.__setattr__(self, "at", tuple(int(x) for x in self.at))
        if not self.tuples:
            raise MappingError(f"map {self.id}: needs at least one tuple")
        n = len(self.tuples[0])
        if n == 0:
            raise MappingError(f"map {self.id}: empty tuple")
        for tp in self.tuples:
            if len(tp) != n:
                raise MappingError(f"map {self.id}: tuple {tp} has arity {len(tp)}, expected {n}")
            if any(x < 1 for x in tp):
                raise MappingError(f"map {self.id}: tuple entries must be >= 1, got {tp}")
        if self.order < 1:
            raise MappingError(f"map {self.id}: order must be >= 1")
        if self.at is not None and (len(self.at) != n or any(x < 0 for x in self.at)):
            raise MappingError(f"map {self.id}: bad origin {self.at}")

    @property
    def ndim(self) -> int:
        return len(self.tuples[0])

    @property
    def extent(self) -> tuple[int, ...]:
        return tuple(math.prod(tp[j] for tp in self.tuples) for j in range(self.ndim))

    @property
    def leaf(self) -> tuple[int, ...]:
        return self.tuples[-1]

    @property
    def unit_counts(self) -> tuple[int, ...]:
        """Units used at each hierarchy level (all tuples but the leaf)."""
        return tuple(math.prod(tp) for tp in self.tuples[:-1])

    @property
    def leaf_count(self) -> int:
        return math.prod(self.unit_counts)


@dataclass(frozen=True)
class MappingSet:
    space: tuple[int, ...]
    maps: tuple[Map, ...]

    def __post_init__(self):
        object.__setattr__(self, "space", tuple(int(x) for x in self.space))
        object.__setattr__(self, "maps", tuple(self.maps))
        if not self.space or any(x < 1 for x in self.space):
            raise MappingError(f"space extents must be >= 1, got {self.space}")
        if not self.maps:
            raise MappingError("mapping set has no maps")
        for m in self.maps:
            if m.ndim != len(self.space):
                raise MappingError(f"map {m.id}: arity {m.ndim} differs from space arity {len(self.space)}")
        orders = [m.order for m in self.maps]
        if len(set(orders)) != len(orders):
            raise MappingError("duplicate map order values")
        ids = [m.id for m in self.maps]
        if len(set(ids)) != len(ids):
            raise MappingError("duplicate map ids")

    @property
    def ordered(self) -> tuple[Map, ...]:
        return tuple(sorted(self.maps, key=lambda m: m.order))

    def origins(self) -> dict[str, tuple[int, ...]]:
        """0-based origin of every map; auto-placed maps go, in order, to the
        first uncovered point with the first dimension varying fastest."""
        placed: list[tuple[tuple[int, ...], tuple[int, ...]]] = []
        out: dict[str, tuple[int, ...]] = {}
        for m in self.ordered:
            origin = m.at if m.at is not None else _first_free(self.space, placed)
            if origin is None:
                raise MappingError(f"map {m.id}: no uncovered space left to place it")
            out[m.id] = origin
            placed.append((origin, m.extent))
        return out


def _covered(p: Sequence[int], boxes) -> bool:
    return any(all(o <= x < o + e for x, o, e in zip(p, org, ext)) for org, ext in boxes)


def _first_free(space, boxes) -> Optional[tuple[int, ...]]:
    cands = [sorted({0} | {org[j] + ext[j] for org, ext in boxes if org[j] + ext[j] < space[j]})
             for j in range(len(space))]
    for rev in itertools.product(*reversed(cands)):
        p = tuple(reversed(rev))
        if not _covered(p, boxes):
            return p
    return None


# -- text ------------------------------------------------------------------

_SPACE = re.compile(r"^space\s*\(([\d,\s]+)\)$")
_MAP = re.compile(r"^map\s+(\S+)\s+order=(\d+)\s+tuples=\[([^\]]*)\](?:\s+at=\(([\d,\s]+)\))?$")


def _tuple(text: str, lineno: int) -> tuple[int, ...]:
    text = text.strip()
    if not (text.startswith("(") and text.endswith(")")):
        raise MappingError(f"line {lineno}: malformed tuple {text!r}")
    try:
        return tuple(int(x) for x in text[1:-1].split(","))
    except ValueError:
        raise MappingError(f"line {lineno}: malformed tuple {text!r}") from None


def parse_mapping(text: str) -> MappingSet:
    space = None
    maps: list[Map] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        m = _SPACE.match(line)
        if m:
            if space is not None:
                raise MappingError(f"line {lineno}: duplicate space line")
            space = _tuple(f"({m.group(1)})", lineno)
            continue
        m = _MAP.match(line)
        if not m:
            raise MappingError(f"line {lineno}: expected 'space (..)' or 'map <id> order=<k> tuples=[..]'")
        if space is None:
            raise MappingError(f"line {lineno}: map before space line")
        tuples = tuple(_tuple(t, lineno) for t in m.group(3).split(";"))
        at = None
        if m.group(4):
            at1 = _tuple(f"({m.group(4)})", lineno)
            if any(x < 1 for x in at1):
                raise MappingError(f"line {lineno}: at= coordinates are 1-based")
            at = tuple(x - 1 for x in at1)
        for tp in tuples:
            if len(tp) != len(space):
                raise MappingError(f"line {lineno}: tuple {tp} has arity {len(tp)}, space has {len(space)}")
        maps.append(Map(m.group(1), int(m.group(2)), tuples, at))
    if space is None:
        raise MappingError("missing 'space (..)' line")
    return MappingSet(space, tuple(maps))


def _fmt(tp: Sequence[int]) -> str:
    return "(" + ",".join(str(x) for x in tp) + ")"


def format_map(m: Map) -> str:
    text = f"map {m.id} order={m.order} tuples=[{';'.join(_fmt(tp) for tp in m.tuples)}]"
    if m.at is not None:
        text += f" at={_fmt(x + 1 for x in m.at)}"
    return text


def emit_mapping(ms: MappingSet) -> str:
    return "\n".join([f"space {_fmt(ms.space)}"] + [format_map(m) for m in ms.maps]) + "\n"


def trivial_mapping(space: Sequence[int], t: TargetSpec) -> MappingSet:
    """One map, one unit per level, the whole space on a single leaf."""
    ones = tuple(1 for _ in space)
    return MappingSet(tuple(space), (Map("m0", 1, tuple([ones] * len(t.hierarchy)) + (tuple(space),)),))


# -- validation ------------------------------------------------------------


def level_caps(t: TargetSpec, caps: Optional[TMapping[str, int]] = None) -> tuple[int, ...]:
    """Usable units per hierarchy level, after target limits and optional caps."""
    out = []
    for i, h in enumerate(t.hierarchy):
        n = h.count
        if i == len(t.hierarchy) - 1 and t.mode is Mode.PIPELINE and t.pipeline is not None:
            n = min(n, t.pipeline.hw_threads)
        if caps and h.name in caps:
            n = min(n, caps[h.name])
        out.append(n)
    return tuple(out)


def validate_mapping(ms: MappingSet, t: TargetSpec) -> list[str]:
    diags: list[str] = []
    K = len(t.hierarchy)
    limits = level_caps(t)
    for m in ms.maps:
        if len(m.tuples) != K + 1:
            diags.append(f"map {m.id}: has {len(m.tuples)} tuples, target {t.name} needs {K + 1}")
            continue
        for i, (units, cap) in enumerate(zip(m.unit_counts, limits)):
            if units > cap:
                diags.append(f"map {m.id}: level {t.hierarchy[i].name} uses {units} units, "
                             f"only {cap} available")
    if diags:
        return diags
    try:
        origins = ms.origins()
    except MappingError as exc:
        return [str(exc)]
    boxes = []
    for m in ms.ordered:
        o, e = origins[m.id], m.extent
        if any(a + b > s for a, b, s in zip(o, e, ms.space)):
            diags.append(f"map {m.id}: subspace at {o} with extent {e} leaves the space {ms.space}")
        for other, (o2, e2) in boxes:
            if all(a < c + d and c < a + b for a, b, c, d in zip(o, e, o2, e2)):
                diags.append(f"maps {other} and {m.id} overlap")
        boxes.append((m.id, (o, e)))
    total = sum(math.prod(m.extent) for m in ms.maps)
    if not diags and total != math.prod(ms.space):
        diags.append(f"maps cover {total} of {math.prod(ms.space)} points; the space is not tiled")
    return diags


def check_mapping(ms: MappingSet, t: TargetSpec) -> None:
    diags = validate_mapping(ms, t)
    if diags:
        raise MappingError("; ".join(diags))


# -- partitioning ----------------------------------------------------------


@dataclass(frozen=True)
class Leaf:
    subspace: Subspace
    units: tuple[int, ...]  # linear unit index at each hierarchy level


@dataclass(frozen=True)
class MapPartition:
    map: Map
    origin: tuple[int, ...]
    leaves: tuple[Leaf, ...]


def _grid(tp: Sequence[int]) -> Iterator[tuple[int, ...]]:
    """Coordinates of a grid, first dimension fastest."""
    for rev in itertools.product(*(range(x) for x in reversed(tp))):
        yield tuple(reversed(rev))


def iter_leaves(m: Map, origin: Sequence[int]) -> Iterator[Leaf]:
    levels = m.tuples[:-1]
    leaf = m.leaf
    # stride of one unit at level i along dim j
    strides = [tuple(math.prod(tp[j] for tp in m.tuples[i + 1:]) for j in range(m.ndim))
               for i in range(len(levels))]

    def walk(i: int, base: tuple[int, ...], path: tuple[int, ...]):
        if i == len(levels):
            yield Leaf(Subspace(leaf, base), path)
            return
        for idx, c in enumerate(_grid(levels[i])):
            pos = tuple(b + cj * sj for b, cj, sj in zip(base, c, strides[i]))
            yield from walk(i + 1, pos, path + (idx,))

    yield from walk(0, tuple(origin), ())


def partition(ms: MappingSet, t: TargetSpec) -> list[MapPartition]:
    check_mapping(ms, t)
    origins = ms.origins()
    return [MapPartition(m, origins[m.id], tuple(iter_leaves(m, origins[m.id]))) for m in ms.ordered]


# -- reduction planning ----------------------------------------------------


@dataclass(frozen=True)
class LevelFanIn:
    map_id: str
    level: int
    level_name: str
    dims: tuple[int, ...]  # reduction dims split at this level
    fan_in: int
    site: str  # "this-level" | "escalate"


@dataclass(frozen=True)
class CrossMapGroup:
    map_ids: tuple[str, ...]
    fan_in: int
    level: int
    site: str


@dataclass(frozen=True)
class AccumulationPlan:
    levels: tuple[LevelFanIn, ...] = ()
    cross: tuple[CrossMapGroup, ...] = ()

    @property
    def empty(self) -> bool:
        return not self.levels and not self.cross

    def for_map(self, map_id: str) -> list[LevelFanIn]:
        return [e for e in self.levels if e.map_id == map_id]


def reduction_plan(ms: MappingSet, reduction_dims, t: TargetSpec) -> AccumulationPlan:
    rdims = sorted(set(reduction_dims))
    levels = []
    for m in ms.ordered:
        for i, tp in enumerate(m.tuples[:-1]):
            split = tuple(j for j in rdims if tp[j] > 1)
            if not split:
                continue
            fan = math.prod(tp[j] for j in split)
            h = t.hierarchy[i]
            levels.append(LevelFanIn(m.id, i, h.name, split, fan,
                                     "this-level" if h.accumulate else "escalate"))
    cross = []
    if rdims and len(ms.maps) > 1:
        origins = ms.origins()
        keep = [j for j in range(len(ms.space)) if j not in rdims]
        ordered = list(ms.ordered)
        parent = list(range(len(ordered)))

        def find(a):
            while parent[a] != a:
                parent[a] = parent[parent[a]]
                a = parent[a]
            return a

        for a, b in itertools.combinations(range(len(ordered)), 2):
            ma, mb = ordered[a], ordered[b]
            oa, ob = origins[ma.id], origins[mb.id]
            if all(oa[j] < ob[j] + mb.extent[j] and ob[j] < oa[j] + ma.extent[j] for j in keep):
                parent[find(a)] = find(b)
        groups: dict[int, list[str]] = {}
        for i, m in enumerate(ordered):
            groups.setdefault(find(i), []).append(m.id)
        site = "this-level" if t.hierarchy[0].accumulate else "escalate"
        for ids in sorted(groups.values(), key=lambda g: [m.id for m in ordered].index(g[0])):
            if len(ids) > 1:
                cross.append(CrossMapGroup(tuple(ids), len(ids), 0, site))
    return AccumulationPlan(tuple(levels), tuple(cross))


# -- enumeration -----------------------------------------------------------


def ordered_factorizations(n: int, parts: int) -> list[tuple[int, ...]]:
    """All tuples of ``parts`` positive integers whose product is ``n`` (lexicographic)."""
    if parts == 1:
        return [(n,)]
    out = []
    for d in _divisors(n):
        out.extend((d,) + rest for rest in ordered_factorizations(n // d, parts - 1))
    return out


@functools.lru_cache(maxsize=4096)
def _divisors(n: int) -> tuple[int, ...]:
    small, large = [], []
    d = 1
    while d * d <= n:
        if n % d == 0:
            small.append(d)
            if d * d != n:
                large.append(n // d)
        d += 1
    return tuple(small + large[::-1])


class MappingSpace:
    """The valid single-map mappings of an iteration space on a target.

    Mappings are indexed ``0 .. total-1`` in a fixed order: level tuples are
    chosen outermost level first, each in lexicographic order; the leaf takes
    what remains. Counting is memoized on the remaining extents, so decoding
    an index never walks the space.
    """

    def __init__(self, space: Sequence[int], t: TargetSpec, caps: Optional[TMapping[str, int]] = None):
        self.space = tuple(space)
        if not self.space or any(x < 1 for x in self.space):
            raise MappingError("space extents must be >= 1")
        self.target = t
        self.K = len(t.hierarchy)
        if caps:
            unknown = set(caps) - {h.name for h in t.hierarchy}
            if unknown:
                raise MappingError(f"unknown hierarchy level(s) in caps: {', '.join(sorted(unknown))}")
        self.limits = level_caps(t, caps)
        self._choices_cache: dict = {}
        self._count_cache: dict = {}
        self.total = self._count(0, self.space)

    def _choices(self, level: int, rem: tuple[int, ...]) -> list[tuple[int, ...]]:
        key = (level, rem)
        if key not in self._choices_cache:
            cap = self.limits[level]
            out: list[tuple[int, ...]] = []

            def walk(j: int, prefix: tuple, prod: int):
                if j == len(rem):
                    out.append(prefix)
                    return
                for d in _divisors(rem[j]):
                    if prod * d > cap:
                        break
                    walk(j + 1, prefix + (d,), prod * d)

            walk(0, (), 1)
            self._choices_cache[key] = out
        return self._choices_cache[key]

    def _count(self, level: int, rem: tuple[int, ...]) -> int:
        if level == self.K:
            return 1
        key = (level, rem)
        if key not in self._count_cache:
            self._count_cache[key] = sum(
                self._count(level + 1, tuple(r // d for r, d in zip(rem, tp)))
                for tp in self._choices(level, rem))
        return self._count_cache[key]

    def decode(self, index: int) -> tuple[tuple[int, ...], ...]:
        if not 0 <= index < self.total:
            raise MappingError(f"mapping index {index} outside 0..{self.total - 1}")
        rem = self.space
        tuples = []
        for level in range(self.K):
            for tp in self._choices(level, rem):
                nxt = tuple(r // d for r, d in zip(rem, tp))
                c = self._count(level + 1, nxt)
                if index < c:
                    tuples.append(tp)
                    rem = nxt
                    break
                index -= c
        return tuple(tuples) + (rem,)

    def make(self, index: int) -> MappingSet:
        return MappingSet(self.space, (Map(f"m{index}", 1, self.decode(index)),))

    def __iter__(self) -> Iterator[MappingSet]:
        index = 0

        def walk(level: int, rem: tuple, acc: tuple):
            if level == self.K:
                yield acc + (rem,)
                return
            for tp in self._choices(level, rem):
                yield from walk(level + 1, tuple(r // d for r, d in zip(rem, tp)), acc + (tp,))

        for tuples in walk(0, self.space, ()):
            yield MappingSet(self.space, (Map(f"m{index}", 1, tuples),))
            index += 1


def enumerate_mappings(space: Sequence[int], t: TargetSpec,
                       caps: Optional[TMapping[str, int]] = None) -> Iterator[MappingSet]:
    """Every valid single-map mapping set, in a fixed deterministic order."""
    return iter(MappingSpace(space, t, caps))


def sample_mappings(space: Sequence[int], t: TargetSpec, limit: int, seed: int = 0,
                    caps: Optional[TMapping[str, int]] = None) -> list[MappingSet]:
    """``min(limit, total)`` distinct valid mappings drawn uniformly, ordered by index.

    Reproducible for a given seed.
    """
    if limit < 1:
        raise MappingError("limit must be >= 1")
    ms = MappingSpace(space, t, caps)
    if ms.total <= limit:
        return list(ms)
    picked = sorted(random.Random(seed).sample(range(ms.total), limit))
    return [ms.make(i) for i in picked]
