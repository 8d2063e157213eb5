"""Command-line front door.

Runs in-process by default; ``--server URL`` forwards estimate and explore
to a running ``cnmcost serve`` instance.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Optional

from . import api
from .errors import CnmError
from .ingest import categories, ingest_target_asm
from .isa import emit_program
from .target import emit_target, list_presets, preset

EXIT_VALIDATION = 1
EXIT_IO = 2
EXIT_UNCONVERGED = 3


class _Usage(Exception):
    pass


def _write(text: str, out: Optional[str]) -> None:
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def _common(p: argparse.ArgumentParser, mapping: bool = True) -> None:
    p.add_argument("--kernel", required=True, help="path.cnmir or bench:name:AxB[:dtype]")
    p.add_argument("--target", required=True, help="path.cfg or preset:name")
    if mapping:
        p.add_argument("--mapping", help="mapping file (default: trivial mapping)")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a target parameter (repeatable)")
    p.add_argument("--out", help="write output here instead of stdout")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="cnmcost", description="Cost estimation for compute-near-memory targets.")
    sub = ap.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("targets", help="list bundled target presets")
    p.add_argument("--show", metavar="NAME", help="print a preset's configuration")

    p = sub.add_parser("estimate", help="estimate one kernel under one mapping")
    _common(p)
    p.add_argument("--alpha", type=float)
    p.add_argument("--max-iters", type=int)
    p.add_argument("--magnitude", type=int, help="operand magnitude for value-dependent latencies")
    p.add_argument("--strict", action="store_true", help="exit 3 if extrapolation did not converge")
    p.add_argument("--server", help="forward to a cnmcost service at this URL")

    p = sub.add_parser("explore", help="estimate a sample of the mapping space, CSV out")
    _common(p, mapping=False)
    p.add_argument("--alpha", type=float)
    p.add_argument("--seed", type=int, default=api.DEFAULT_SEED)
    p.add_argument("--limit", type=int, default=api.DEFAULT_LIMIT)
    p.add_argument("--cap", action="append", default=[], metavar="LEVEL=N",
                   help="limit the units used at a hierarchy level (repeatable)")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--strict", action="store_true")
    p.add_argument("--server")

    p = sub.add_parser("codegen", help="lower a kernel leaf to llvcnm")
    _common(p)

    p = sub.add_parser("ingest", help="translate target assembly to llvcnm")
    p.add_argument("asm", help="assembly file")
    p.add_argument("--out")

    p = sub.add_parser("serve", help="run the HTTP service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    return ap


def _kernel_target(args):
    k = api.resolve_kernel(args.kernel)
    t = api.resolve_target(args.target, overrides=args.overrides)
    return k, t


def _remote_inputs(args) -> dict:
    body = {"overrides": args.overrides}
    if args.kernel.startswith("bench:"):
        body["kernel"] = args.kernel
    else:
        body["kernel_text"] = Path(args.kernel).read_text()
    if args.target.startswith("preset:"):
        body["target"] = args.target
    else:
        body["target_text"] = Path(args.target).read_text()
    return body


def _post(server: str, route: str, body: dict) -> dict:
    import httpx

    try:
        r = httpx.post(server.rstrip("/") + route, json=body, timeout=None)
    except httpx.HTTPError as exc:
        raise OSError(f"cannot reach {server}: {exc}") from None
    if r.status_code in (400, 422):
        detail = r.json().get("detail")
        raise CnmError(detail if isinstance(detail, str) else json.dumps(detail))
    if r.status_code != 200:
        raise OSError(f"{server}{route} answered {r.status_code}")
    return r.json()


def _caps(items) -> dict:
    caps = {}
    for item in items:
        name, eq, val = item.partition("=")
        if not eq or not val.strip().isdigit():
            raise _Usage(f"bad --cap {item!r}; expected LEVEL=N")
        caps[name.strip()] = int(val)
    return caps


def cmd_targets(args) -> int:
    if args.show:
        sys.stdout.write(emit_target(preset(args.show)))
    else:
        sys.stdout.write("".join(f"{n}\n" for n in list_presets()))
    return 0


def cmd_estimate(args) -> int:
    if args.server:
        body = _remote_inputs(args)
        if args.mapping:
            body["mapping_text"] = Path(args.mapping).read_text()
        body.update(alpha=args.alpha, max_portion_iters=args.max_iters, value_magnitude=args.magnitude)
        record = _post(args.server, "/estimate", body)
        _write(json.dumps(record, indent=2, sort_keys=True) + "\n", args.out)
        converged = record["converged"]
    else:
        k, t = _kernel_target(args)
        ms = api.resolve_mapping(k, t, args.mapping)
        res = api.estimate(k, t, ms, api.make_config(args.alpha, args.max_iters, args.magnitude))
        _write(api.format_record(res), args.out)
        converged = res.converged
    if args.strict and not converged:
        print("error: extrapolation did not converge", file=sys.stderr)
        return EXIT_UNCONVERGED
    return 0


def cmd_explore(args) -> int:
    if args.limit < 1:
        raise _Usage("--limit must be >= 1")
    caps = _caps(args.cap)
    print(f"seed={args.seed}", file=sys.stderr)
    if args.server:
        body = _remote_inputs(args)
        body.update(limit=args.limit, seed=args.seed, alpha=args.alpha, caps=caps)
        rows = [api.ExploreRow(**r) for r in _post(args.server, "/explore", body)["rows"]]
    else:
        k, t = _kernel_target(args)
        rows = api.explore(k, t, args.limit, args.seed, api.make_config(args.alpha), caps or None,
                           args.jobs)
    _write(api.rows_to_csv(rows), args.out)
    print(api.summary_line(rows, args.seed), file=sys.stderr)
    if args.strict and not all(r.converged for r in rows):
        print("error: some estimates did not converge", file=sys.stderr)
        return EXIT_UNCONVERGED
    return 0


def cmd_codegen(args) -> int:
    k, t = _kernel_target(args)
    ms = api.resolve_mapping(k, t, args.mapping)
    _write(emit_program(api.leaf_program(k, t, ms)), args.out)
    return 0


def cmd_ingest(args) -> int:
    p = ingest_target_asm(Path(args.asm).read_text())
    _write(emit_program(p), args.out)
    cats = categories(p)
    print(" ".join(f"{k}={v}" for k, v in cats.items()), file=sys.stderr)
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    uvicorn.run("cnmcost.service:app", host=args.host, port=args.port)
    return 0


COMMANDS = {"targets": cmd_targets, "estimate": cmd_estimate, "explore": cmd_explore,
            "codegen": cmd_codegen, "ingest": cmd_ingest, "serve": cmd_serve}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.cmd](args)
    except (CnmError, _Usage) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
