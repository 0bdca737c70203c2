"""HTTP service wrapping the pipelines.

Configs arrive as JSON mirroring the TOML sections one-to-one and pass
through the same validator as the CLI. Prepared stores stay resident in the
process after /prepare (or the first /query that references them), which is
the point of running this as a service: preparation is paid once, then any
number of clients issue subpopulation queries against memory.

Run with: uvicorn matchcube.service:app
"""

from __future__ import annotations

import os
import threading
from typing import Any

from fastapi import FastAPI, HTTPException
from pydantic import BaseModel, Field

from . import pipelines
from .config import config_from_mapping
from .errors import ConfigError, MatchcubeError
from .store import PreparedStore, load_store


class StageEntry(BaseModel):
    stage: str
    rows: int


class MatchRequest(BaseModel):
    config: dict[str, Any]
    out_dir: str
    threads: int = Field(default=1, ge=1)


class MatchResponse(BaseModel):
    method: str
    n_rows: int
    n_treated: int
    n_control: int
    stages: list[StageEntry]
    output_files: list[str]


class BalanceRequest(BaseModel):
    config: dict[str, Any]
    matched_path: str
    out_dir: str


class CovariateBalance(BaseModel):
    covariate: str
    raw_awmd: float
    matched_awmd: float


class BalanceResponse(BaseModel):
    rows: list[CovariateBalance]
    raw_treated: int
    raw_control: int
    matched_treated: int
    matched_control: int
    output_files: list[str]


class AteRequest(BaseModel):
    config: dict[str, Any]
    matched_path: str
    out_dir: str
    normalized: bool = False


class AteResponse(BaseModel):
    value: float
    normalized: bool
    output_files: list[str]


class PrepareRequest(BaseModel):
    config: dict[str, Any]
    out_dir: str
    threads: int = Field(default=1, ge=1)


class GroupInfo(BaseModel):
    index: int
    treatments: list[str]
    shared: list[str]
    union: list[str]
    rows: int


class PrepareResponse(BaseModel):
    store_id: str
    store_dir: str
    objective: float
    groups: list[GroupInfo]
    stages: list[StageEntry]


class QueryRequest(BaseModel):
    store: str  # a store id returned by /prepare, or a store directory
    treatment: str
    predicate: str | None = None
    out_dir: str


class QueryResponse(BaseModel):
    n_rows: int
    n_treated: int
    n_control: int
    n_subclasses: int
    output_files: list[str]


class StoreList(BaseModel):
    stores: list[str]


app = FastAPI(title="matchcube", version="0.1.0")
app.state.stores = {}
_registry_lock = threading.Lock()


def _config(payload: dict[str, Any]):
    try:
        return config_from_mapping(payload)
    except ConfigError as err:
        raise HTTPException(status_code=422, detail=err.errors) from None


def _wrap(fn):
    try:
        return fn()
    except ConfigError as err:
        raise HTTPException(status_code=422, detail=err.errors) from None
    except MatchcubeError as err:
        raise HTTPException(status_code=400, detail=str(err)) from None


@app.get("/health")
def health() -> dict:
    return {"status": "ok"}


@app.get("/stores", response_model=StoreList)
def stores() -> StoreList:
    return StoreList(stores=sorted(app.state.stores))


@app.post("/match", response_model=MatchResponse)
def match(req: MatchRequest) -> MatchResponse:
    cfg = _config(req.config)
    result = _wrap(lambda: pipelines.run_match(cfg, req.out_dir, threads=req.threads))
    treated, control = result.counts()
    return MatchResponse(
        method=result.method,
        n_rows=result.n_rows,
        n_treated=treated,
        n_control=control,
        stages=[StageEntry(stage=s, rows=r) for s, r in result.log.entries],
        output_files=result.output_files,
    )


@app.post("/balance", response_model=BalanceResponse)
def balance(req: BalanceRequest) -> BalanceResponse:
    cfg = _config(req.config)
    result = _wrap(lambda: pipelines.run_balance(cfg, req.matched_path, req.out_dir))
    report = result.report
    return BalanceResponse(
        rows=[
            CovariateBalance(covariate=c, raw_awmd=r, matched_awmd=m)
            for c, r, m in report.rows()
        ],
        raw_treated=report.raw_treated,
        raw_control=report.raw_control,
        matched_treated=report.matched_treated,
        matched_control=report.matched_control,
        output_files=result.output_files,
    )


@app.post("/ate", response_model=AteResponse)
def ate(req: AteRequest) -> AteResponse:
    cfg = _config(req.config)
    result = _wrap(
        lambda: pipelines.run_ate(
            cfg, req.matched_path, req.out_dir, normalized=req.normalized
        )
    )
    return AteResponse(
        value=result.value,
        normalized=result.normalized,
        output_files=result.output_files,
    )


@app.post("/prepare", response_model=PrepareResponse)
def prepare(req: PrepareRequest) -> PrepareResponse:
    cfg = _config(req.config)
    result = _wrap(lambda: pipelines.run_prepare(cfg, req.out_dir, threads=req.threads))
    store_id = os.path.abspath(result.store_dir)
    with _registry_lock:
        app.state.stores[store_id] = result.store
    return PrepareResponse(
        store_id=store_id,
        store_dir=result.store_dir,
        objective=result.objective,
        groups=[
            GroupInfo(
                index=pg.index,
                treatments=list(pg.treatments),
                shared=list(pg.shared),
                union=list(pg.union),
                rows=pg.table.n_rows,
            )
            for pg in result.store.groups
        ],
        stages=[StageEntry(stage=s, rows=r) for s, r in result.log.entries],
    )


def _resident_store(ref: str) -> PreparedStore:
    key = os.path.abspath(ref)
    with _registry_lock:
        if key not in app.state.stores:
            app.state.stores[key] = load_store(key)
        return app.state.stores[key]


@app.post("/query", response_model=QueryResponse)
def query(req: QueryRequest) -> QueryResponse:
    store = _wrap(lambda: _resident_store(req.store))
    result = _wrap(
        lambda: pipelines.run_query(store, req.treatment, req.predicate, req.out_dir)
    )
    s = result.subclassified
    treated, control = s.counts()
    return QueryResponse(
        n_rows=s.n_rows,
        n_treated=treated,
        n_control=control,
        n_subclasses=s.n_subclasses(),
        output_files=result.output_files,
    )
