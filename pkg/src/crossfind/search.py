"""Online query pipeline: generate code for the query, embed, score, fuse, rank."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from crossfind.core import (
    SCHEMAS,
    FusionWeights,
    GeneratedCode,
    Query,
    RankedItem,
    RankedResult,
    SchemaScores,
    ranked_from_scores,
)
from crossfind.errors import DataError, DegenerateVectorError, ParameterError
from crossfind.fusion import STRATEGIES, RRF_K, QueryScores, RunList, fuse_runs
from crossfind.indexer import CodebaseIndex, check_compatible
from crossfind.providers import CODE, TEXT, ProviderSet, embed_batch, generate_code

SCAN_CHUNK = 4096


@dataclass(frozen=True)
class SearchRequest:
    query: Query
    top_k: int = 10
    weights: FusionWeights | None = None
    strategy: str = "linear"
    recall: int = 10
    k_const: float = RRF_K

    def __post_init__(self):
        if self.top_k < 1:
            raise ParameterError("top_k must be positive")
        if self.strategy not in STRATEGIES:
            raise ParameterError(f"unknown strategy {self.strategy!r}; choose from {', '.join(STRATEGIES)}")


@dataclass
class SearchResponse:
    result: RankedResult
    gen_code: GeneratedCode
    timing: dict[str, float] = field(default_factory=dict)
    degraded: bool = False
    strategy: str = "linear"
    weights: FusionWeights | None = None

    def to_dict(self) -> dict:
        body = self.result.to_dict()
        body.update(
            strategy=self.strategy,
            weights=list(self.weights.as_tuple()) if self.weights else None,
            degraded=self.degraded,
            gen_code={
                "source": self.gen_code.source,
                "generator": self.gen_code.generator,
                "truncated": self.gen_code.truncated,
                "fallback": self.gen_code.fallback,
            },
            timing_ms=self.timing,
        )
        return body


@dataclass
class QueryScoring:
    scores: np.ndarray  # (n_candidates, 3) in qc, qm, cg order
    gen_code: GeneratedCode
    timing: dict[str, float]


def cosine_scan(matrix: np.ndarray, vec: np.ndarray) -> np.ndarray:
    """Cosine of ``vec`` against every row of ``matrix``, scanned in chunks."""
    v = vec.astype(np.float64)
    vnorm = float(np.linalg.norm(v))
    if vnorm == 0.0:
        raise DegenerateVectorError("query-side vector is zero")
    out = np.empty(matrix.shape[0], dtype=np.float64)
    for start in range(0, matrix.shape[0], SCAN_CHUNK):
        block = matrix[start:start + SCAN_CHUNK].astype(np.float64)
        norms = np.linalg.norm(block, axis=1)
        if np.any(norms == 0.0):
            raise DegenerateVectorError("index contains a zero vector")
        out[start:start + SCAN_CHUNK] = (block @ v) / (norms * vnorm)
    return np.clip(out, -1.0, 1.0)


def score_query(query: Query, index: CodebaseIndex, providers: ProviderSet) -> QueryScoring:
    """All three schema scores of every indexed candidate for ``query``."""
    t0 = time.perf_counter()
    gen = generate_code(query, providers.generator, providers.generate_template)
    t1 = time.perf_counter()
    q_qc = embed_batch([query.text], providers.qc, TEXT)[0]
    q_qm = q_qc if providers.qm is providers.qc else embed_batch([query.text], providers.qm, TEXT)[0]
    g_vec = embed_batch([gen.source], providers.cg, CODE)[0]
    t2 = time.perf_counter()
    for schema, mat, vec in (("qc", index.c_qc, q_qc), ("qm", index.m, q_qm), ("cg", index.c_cg, g_vec)):
        if mat.shape[1] != vec.dim:
            raise DataError(f"schema {schema}: index dim {mat.shape[1]} != query-side dim {vec.dim}")
    scores = np.column_stack([
        cosine_scan(index.c_qc, q_qc.values),
        cosine_scan(index.m, q_qm.values),
        cosine_scan(index.c_cg, g_vec.values),
    ])
    t3 = time.perf_counter()
    timing = {
        "generation": (t1 - t0) * 1e3,
        "embedding": (t2 - t1) * 1e3,
        "scoring": (t3 - t2) * 1e3,
    }
    return QueryScoring(scores, gen, timing)


def rank_scores(
    query_id: str,
    ids: list[str],
    scores: np.ndarray,
    strategy: str = "linear",
    weights: FusionWeights | None = None,
    recall: int = 10,
    k_const: float = RRF_K,
) -> RankedResult:
    """Turn an ``(n, 3)`` schema-score matrix into a full ranking."""
    per = [SchemaScores(float(a), float(b), float(c)) for a, b, c in scores]
    if strategy == "linear":
        w = weights or FusionWeights.default()
        fused = w.alpha * scores[:, 0] + w.beta * scores[:, 1] + w.gamma * scores[:, 2]
        return ranked_from_scores(query_id, [(cid, float(f), sc) for cid, f, sc in zip(ids, fused, per)])
    runs = [RunList.from_scores(zip(ids, scores[:, j].tolist())) for j in range(len(SCHEMAS))]
    by_id = dict(zip(ids, per))
    ordered = fuse_runs(strategy, runs, recall=recall, k_const=k_const)
    return RankedResult(
        query_id,
        tuple(RankedItem(cid, float(s), by_id[cid], i + 1) for i, (cid, s) in enumerate(ordered)),
    )


def search(req: SearchRequest, index: CodebaseIndex, providers: ProviderSet) -> SearchResponse:
    check_compatible(index, providers)
    t0 = time.perf_counter()
    scored = score_query(req.query, index, providers)
    t1 = time.perf_counter()
    weights = (req.weights or FusionWeights.default()) if req.strategy == "linear" else None
    ranked = rank_scores(
        req.query.id, index.ids, scored.scores, req.strategy, weights, req.recall, req.k_const
    )
    t2 = time.perf_counter()
    timing = dict(scored.timing)
    timing["fusion"] = (t2 - t1) * 1e3
    timing["total"] = (t2 - t0) * 1e3
    return SearchResponse(
        result=ranked.truncate(min(req.top_k, len(index))),
        gen_code=scored.gen_code,
        timing=timing,
        degraded=scored.gen_code.fallback,
        strategy=req.strategy,
        weights=weights,
    )


def search_single_schema(
    req: SearchRequest, index: CodebaseIndex, providers: ProviderSet, schema: str
) -> SearchResponse:
    if schema not in SCHEMAS:
        raise ParameterError(f"unknown schema {schema!r}")
    unit = SearchRequest(req.query, req.top_k, FusionWeights.unit(schema), "linear")
    return search(unit, index, providers)


def score_dataset(
    pairs: list[tuple[Query, frozenset[str]]], index: CodebaseIndex, providers: ProviderSet
) -> list[QueryScores]:
    """Schema scores of every (query, candidate) pair, for calibration and evaluation."""
    check_compatible(index, providers)
    out = []
    for query, positives in pairs:
        scored = score_query(query, index, providers)
        out.append(QueryScores(query.id, tuple(index.ids), scored.scores, positives))
    return out
