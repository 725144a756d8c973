"""HTTP search service.

Endpoints: ``GET /healthz``, ``POST /search`` and ``GET /metrics``. One
process serves exactly one index; run one process per codebase.
"""

from __future__ import annotations

import asyncio
import hashlib
import json
import logging
import threading
import time
from collections import Counter, deque
from contextlib import asynccontextmanager
from pathlib import Path

import numpy as np
from fastapi import FastAPI, Request
from fastapi.concurrency import run_in_threadpool
from fastapi.responses import Response

from crossfind.core import FusionWeights, Query
from crossfind.errors import CrossfindError, IndexIncompatible, ProviderError
from crossfind.indexer import CodebaseIndex, load_index
from crossfind.providers import ProviderSet
from crossfind.search import SearchRequest, search

log = logging.getLogger(__name__)


def canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


def query_id_for(text: str, language: str) -> str:
    return "q-" + hashlib.sha1(f"{language}\0{text}".encode("utf-8")).hexdigest()[:12]


class BadRequest(ValueError):
    pass


def parse_search_body(raw: bytes, default_weights: FusionWeights) -> SearchRequest:
    try:
        body = json.loads(raw)
    except (ValueError, UnicodeDecodeError) as exc:
        raise BadRequest(f"malformed JSON: {exc}") from exc
    if not isinstance(body, dict):
        raise BadRequest("request body must be a JSON object")
    text = body.get("query")
    language = body.get("language", "")
    if not isinstance(text, str) or not text.strip():
        raise BadRequest("'query' must be a non-empty string")
    if not isinstance(language, str):
        raise BadRequest("'language' must be a string")
    top_k = body.get("top_k", 10)
    if not isinstance(top_k, int) or isinstance(top_k, bool) or top_k < 1:
        raise BadRequest("'top_k' must be a positive integer")
    qid = body.get("id") or query_id_for(text, language)
    weights = default_weights
    raw_w = body.get("weights")
    try:
        if isinstance(raw_w, dict):
            weights = FusionWeights(float(raw_w["alpha"]), float(raw_w["beta"]), float(raw_w["gamma"]))
        elif isinstance(raw_w, list) and len(raw_w) == 3:
            weights = FusionWeights(*map(float, raw_w))
        elif raw_w is not None:
            raise BadRequest("'weights' must be [alpha, beta, gamma] or an object")
        return SearchRequest(
            Query(str(qid), text, language),
            top_k=top_k,
            weights=weights,
            strategy=body.get("strategy", "linear"),
        )
    except (KeyError, TypeError, ValueError, CrossfindError) as exc:
        raise BadRequest(str(exc)) from exc


class ServiceState:
    def __init__(self, providers: ProviderSet, index: CodebaseIndex | None, weights: FusionWeights, concurrency: int):
        self.providers = providers
        self.index = index
        self.weights = weights
        self.concurrency = concurrency
        self.counts: Counter[str] = Counter()
        self.latency_ms: deque[float] = deque(maxlen=10_000)
        self.overhead_ms: deque[float] = deque(maxlen=10_000)
        self.lock = threading.Lock()

    def record(self, key: str, latency: float | None = None, overhead: float | None = None) -> None:
        with self.lock:
            self.counts[key] += 1
            if latency is not None:
                self.latency_ms.append(latency)
            if overhead is not None:
                self.overhead_ms.append(overhead)


def _percentiles(values) -> dict[str, float]:
    if not values:
        return {}
    arr = np.fromiter(values, dtype=np.float64)
    return {f"p{q}": float(np.percentile(arr, q)) for q in (50, 90, 99)}


def _json(obj, status: int = 200, headers: dict | None = None) -> Response:
    return Response(canonical_json(obj), status_code=status, media_type="application/json", headers=headers)


def create_app(
    providers: ProviderSet,
    index: CodebaseIndex | None = None,
    *,
    weights: FusionWeights | None = None,
    index_path: str | Path | None = None,
    concurrency: int = 8,
) -> FastAPI:
    """Build the service. With ``index_path`` the index loads in the background on startup."""
    state = ServiceState(providers, index, weights or FusionWeights.default(), concurrency)

    @asynccontextmanager
    async def lifespan(app: FastAPI):
        state.gate = asyncio.Semaphore(concurrency)
        task = None
        if state.index is None and index_path is not None:
            async def load():
                try:
                    state.index = await run_in_threadpool(load_index, index_path, providers)
                    log.info("index %s loaded (%d entries)", index_path, len(state.index))
                except CrossfindError as exc:
                    log.error("index load failed: %s", exc)
                    state.load_error = str(exc)
            task = asyncio.create_task(load())
        yield
        if task is not None and not task.done():
            task.cancel()

    app = FastAPI(title="crossfind", lifespan=lifespan)
    app.state.service = state
    state.gate = asyncio.Semaphore(concurrency)
    state.load_error = None

    @app.get("/healthz")
    async def healthz():
        state.record("healthz")
        if state.index is None:
            return _json({"status": "error" if state.load_error else "loading", "error": state.load_error}, 503)
        return _json({
            "status": "ok",
            "codebase_id": state.index.codebase_id,
            "entries": len(state.index),
            "fingerprints": state.index.provider_fingerprints,
        })

    @app.post("/search")
    async def do_search(request: Request):
        started = time.perf_counter()
        try:
            req = parse_search_body(await request.body(), state.weights)
        except BadRequest as exc:
            state.record("status_400")
            return _json({"error": "bad_request", "message": str(exc)}, 400)
        if state.index is None:
            state.record("status_503")
            return _json({"error": "index_not_loaded"}, 503)
        async with state.gate:
            try:
                resp = await run_in_threadpool(search, req, state.index, state.providers)
            except IndexIncompatible as exc:
                state.record("status_409")
                return _json({"error": "index_incompatible", "message": str(exc)}, 409)
            except ProviderError as exc:
                state.record("status_503")
                return _json({"error": "provider_unavailable", "message": str(exc), "degraded": False}, 503)
            except CrossfindError as exc:
                state.record("status_400")
                return _json({"error": type(exc).__name__, "message": str(exc)}, 400)
        body = canonical_json(resp.to_dict())
        elapsed = (time.perf_counter() - started) * 1e3
        provider_ms = resp.timing.get("generation", 0.0) + resp.timing.get("embedding", 0.0)
        overhead = max(0.0, elapsed - provider_ms)
        # a provider outage that the fallback absorbed is still reported as unavailable
        status = 503 if resp.degraded and resp.gen_code.error == "unavailable" else 200
        state.record(f"status_{status}", elapsed, overhead)
        state.record("search")
        return Response(
            body,
            status_code=status,
            media_type="application/json",
            headers={"X-Handler-Overhead-Ms": f"{overhead:.4f}"},
        )

    @app.get("/metrics")
    async def metrics():
        with state.lock:
            counts = dict(state.counts)
            latency = list(state.latency_ms)
            overhead = list(state.overhead_ms)
        return _json({
            "requests": counts,
            "latency_ms": _percentiles(latency),
            "handler_overhead_ms": _percentiles(overhead),
        })

    return app
