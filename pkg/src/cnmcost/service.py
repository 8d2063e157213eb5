"""HTTP front end over the estimator (FastAPI)."""

from __future__ import annotations

from typing import Optional

from fastapi import FastAPI, HTTPException, Request
from fastapi.responses import JSONResponse, PlainTextResponse
from pydantic import BaseModel, Field

from . import api
from .errors import CnmError
from .ingest import categories, ingest_target_asm
from .isa import emit_program
from .target import emit_target, list_presets, preset


class KernelTarget(BaseModel):
    kernel: Optional[str] = Field(None, description="bench:name:sizes reference")
    kernel_text: Optional[str] = None
    target: Optional[str] = Field(None, description="preset:name reference")
    target_text: Optional[str] = None
    overrides: list[str] = []


class EstimateRequest(KernelTarget):
    mapping_text: Optional[str] = None
    alpha: Optional[float] = None
    max_portion_iters: Optional[int] = None
    value_magnitude: Optional[int] = None


class ExploreRequest(KernelTarget):
    limit: int = Field(api.DEFAULT_LIMIT, ge=1)
    seed: int = api.DEFAULT_SEED
    alpha: Optional[float] = None
    caps: dict[str, int] = {}


class CodegenRequest(KernelTarget):
    mapping_text: Optional[str] = None


class IngestRequest(BaseModel):
    asm: str


class ExploreResponse(BaseModel):
    seed: int
    rows: list[dict]
    summary: str


app = FastAPI(title="cnmcost")


@app.exception_handler(CnmError)
async def _cnm_error(request: Request, exc: CnmError):
    return JSONResponse(status_code=422, content={"detail": str(exc), "kind": type(exc).__name__})


def _inputs(req: KernelTarget):
    # file paths are never dereferenced on the server; clients send text
    if req.kernel_text is None and not (req.kernel or "").startswith("bench:"):
        raise HTTPException(400, "kernel must be a bench: reference or kernel_text")
    if req.target_text is None and not (req.target or "").startswith("preset:"):
        raise HTTPException(400, "target must be a preset: reference or target_text")
    k = api.resolve_kernel(req.kernel or "", req.kernel_text)
    t = api.resolve_target(req.target or "", req.target_text, req.overrides)
    return k, t


@app.get("/health")
def health():
    return {"status": "ok"}


@app.get("/targets")
def targets():
    return {"presets": list_presets()}


@app.get("/targets/{name}", response_class=PlainTextResponse)
def target_config(name: str):
    if name not in list_presets():
        raise HTTPException(404, f"no preset named {name!r}")
    return emit_target(preset(name))


@app.post("/estimate")
def estimate(req: EstimateRequest):
    k, t = _inputs(req)
    ms = api.resolve_mapping(k, t, text=req.mapping_text)
    cfg = api.make_config(req.alpha, req.max_portion_iters, req.value_magnitude)
    return api.estimate(k, t, ms, cfg).to_dict()


@app.post("/explore", response_model=ExploreResponse)
def explore(req: ExploreRequest):
    k, t = _inputs(req)
    rows = api.explore(k, t, req.limit, req.seed, api.make_config(req.alpha), req.caps or None)
    return {"seed": req.seed, "rows": [r.to_dict() for r in rows],
            "summary": api.summary_line(rows, req.seed)}


@app.post("/codegen", response_class=PlainTextResponse)
def codegen(req: CodegenRequest):
    k, t = _inputs(req)
    ms = api.resolve_mapping(k, t, text=req.mapping_text)
    return emit_program(api.leaf_program(k, t, ms))


@app.post("/ingest")
def ingest(req: IngestRequest):
    p = ingest_target_asm(req.asm)
    return {"llvcnm": emit_program(p), "categories": categories(p)}
