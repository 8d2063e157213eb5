"""Builders for the benchmark kernels at parametric sizes."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

from .cnmir import KernelIr, build_kernel
from .errors import KernelError
from .isa import DataType

BENCHMARKS = ("va", "relu", "gemv", "gemm", "red", "scan", "sel", "hst")
_RANK = {"va": 1, "relu": 1, "gemv": 2, "gemm": 3, "red": 1, "scan": 1, "sel": 1, "hst": 1}


@dataclass(frozen=True)
class BenchSpec:
    name: str
    extents: tuple[int, ...]
    dtype: DataType = DataType.I32
    selectivity: Optional[float] = None
    bins: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "extents", tuple(int(e) for e in self.extents))
        object.__setattr__(self, "dtype", DataType(self.dtype))
        if self.name not in BENCHMARKS:
            raise KernelError(f"unknown benchmark {self.name!r}; choose from {', '.join(BENCHMARKS)}")
        if len(self.extents) != _RANK[self.name]:
            raise KernelError(f"{self.name} takes {_RANK[self.name]} extent(s), got {len(self.extents)}")
        if any(e < 1 for e in self.extents):
            raise KernelError("benchmark extents must be positive")
        if self.name == "sel" and self.selectivity is None:
            raise KernelError("sel requires a selectivity")
        if self.name == "hst" and self.bins is None:
            raise KernelError("hst requires a bin count")
        if self.bins is not None and self.bins < 1:
            raise KernelError("bins must be positive")


def _op(i, kind, dt, inputs, out, guarded=False):
    return {"id": f"op{i}", "kind": kind, "dtype": dt, "inputs": inputs, "output": out,
            "guarded": guarded}


def build_benchmark(b: BenchSpec) -> KernelIr:
    dt = b.dtype.value
    name = b.name
    if name in ("va", "relu", "red", "scan", "sel", "hst"):
        (n,) = b.extents
    if name == "va":
        desc = {
            "operands": [{"id": "a", "shape": [n], "dtype": dt, "role": "in", "index": ["i"]},
                         {"id": "b", "shape": [n], "dtype": dt, "role": "in", "index": ["i"]},
                         {"id": "c", "shape": [n], "dtype": dt, "role": "out", "index": ["i"]}],
            "loops": [{"var": "i", "extent": n, "kind": "parallel"}],
            "ops": [_op(0, "ADD", dt, ["a", "b"], "c")],
        }
    elif name == "relu":
        desc = {
            "operands": [{"id": "x", "shape": [n], "dtype": dt, "role": "in", "index": ["i"]},
                         {"id": "y", "shape": [n], "dtype": dt, "role": "out", "index": ["i"]}],
            "loops": [{"var": "i", "extent": n, "kind": "parallel"}],
            "ops": [_op(0, "CMP", dt, ["x", "0"], "y")],
        }
    elif name == "gemv":
        m, k = b.extents
        desc = {
            "operands": [{"id": "A", "shape": [m, k], "dtype": dt, "role": "in", "index": ["i", "j"]},
                         {"id": "x", "shape": [k], "dtype": dt, "role": "in", "index": ["j"]},
                         {"id": "y", "shape": [m], "dtype": dt, "role": "out", "index": ["i"]}],
            "loops": [{"var": "i", "extent": m, "kind": "parallel"},
                      {"var": "j", "extent": k, "kind": "reduction"}],
            "ops": [_op(0, "MUL", dt, ["A", "x"], "t0"), _op(1, "ADD", dt, ["y", "t0"], "y")],
        }
    elif name == "gemm":
        m, nn, k = b.extents
        desc = {
            "operands": [{"id": "A", "shape": [m, k], "dtype": dt, "role": "in", "index": ["i", "k"]},
                         {"id": "B", "shape": [k, nn], "dtype": dt, "role": "in", "index": ["k", "j"]},
                         {"id": "C", "shape": [m, nn], "dtype": dt, "role": "out", "index": ["i", "j"]}],
            "loops": [{"var": "i", "extent": m, "kind": "parallel"},
                      {"var": "j", "extent": nn, "kind": "parallel"},
                      {"var": "k", "extent": k, "kind": "reduction"}],
            "ops": [_op(0, "MUL", dt, ["A", "B"], "t0"), _op(1, "ADD", dt, ["C", "t0"], "C")],
        }
    elif name == "red":
        desc = {
            "operands": [{"id": "x", "shape": [n], "dtype": dt, "role": "in", "index": ["i"]},
                         {"id": "s", "shape": [1], "dtype": dt, "role": "out", "index": "*"}],
            "loops": [{"var": "i", "extent": n, "kind": "reduction"}],
            "ops": [_op(0, "ADD", dt, ["s", "x"], "s")],
        }
    elif name == "scan":
        desc = {
            "operands": [{"id": "x", "shape": [n], "dtype": dt, "role": "in", "index": ["i"]},
                         {"id": "s", "shape": [1], "dtype": dt, "role": "out", "index": "*"},
                         {"id": "y", "shape": [n], "dtype": dt, "role": "out", "index": ["i"]}],
            "loops": [{"var": "i", "extent": n, "kind": "reduction"}],
            "ops": [_op(0, "ADD", dt, ["s", "x"], "s"), _op(1, "COPY", dt, ["s"], "y")],
        }
    elif name == "sel":
        desc = {
            "operands": [{"id": "x", "shape": [n], "dtype": dt, "role": "in", "index": ["i"]},
                         {"id": "y", "shape": [n], "dtype": dt, "role": "out", "index": ["i"]}],
            "loops": [{"var": "i", "extent": n, "kind": "parallel"}],
            "ops": [_op(0, "CMP", dt, ["x", "0"], "t0"), _op(1, "COPY", dt, ["x"], "y", True)],
        }
    else:  # hst
        guarded = b.selectivity is not None
        desc = {
            "operands": [{"id": "x", "shape": [n], "dtype": dt, "role": "in", "index": ["i"]},
                         {"id": "h", "shape": [b.bins], "dtype": dt, "role": "out", "index": "*"}],
            "loops": [{"var": "i", "extent": n, "kind": "parallel"}],
            "ops": [_op(0, "SHR", dt, ["x", "4"], "t0"), _op(1, "ADD", dt, ["h", "1"], "h", guarded)],
        }
    desc["name"] = name
    desc["selectivity"] = b.selectivity
    return build_kernel(desc)


def parse_bench(text: str) -> BenchSpec:
    """Parse ``bench:name:AxB[:dtype][:sigma=S][:bins=N]`` (the ``bench:`` prefix is optional)."""
    parts = text.split(":")
    if parts and parts[0] == "bench":
        parts = parts[1:]
    if len(parts) < 2:
        raise KernelError(f"bad benchmark reference {text!r}; expected bench:name:AxB[:dtype]")
    name, sizes, *rest = parts
    try:
        extents = tuple(int(x) for x in sizes.lower().split("x"))
    except ValueError:
        raise KernelError(f"bad benchmark sizes {sizes!r}") from None
    dtype = DataType.I32
    sel = bins = None
    for p in rest:
        key, eq, val = p.partition("=")
        try:
            if not eq:
                dtype = DataType(p)
            elif key in ("sigma", "selectivity"):
                sel = float(val)
            elif key == "bins":
                bins = int(val)
            else:
                raise KernelError(f"unknown benchmark option {key!r}")
        except ValueError as exc:
            if isinstance(exc, KernelError):
                raise
            raise KernelError(f"bad benchmark option {p!r}") from None
    return BenchSpec(name, extents, dtype, sel, bins)
