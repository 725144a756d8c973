"""Domain types and the similarity/fusion arithmetic.

Nothing in here performs I/O. All values are immutable, so every function
is safe to call from any number of threads.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from crossfind.errors import (
    DataError,
    DegenerateVectorError,
    DimensionError,
    DuplicateCandidateError,
    InvalidWeightsError,
)

SCHEMAS = ("qc", "qm", "cg")
WEIGHT_ORIGINS = ("default", "calibrated", "manual")
_SIMPLEX_TOL = 1e-9


@dataclass(frozen=True)
class Query:
    id: str
    text: str
    language: str

    def __post_init__(self):
        if not self.text.strip():
            raise DataError(f"query {self.id!r} has empty text")


@dataclass(frozen=True)
class CodeSnippet:
    id: str
    source: str
    language: str

    def __post_init__(self):
        if not self.source.strip():
            raise DataError(f"snippet {self.id!r} has empty source")


@dataclass(frozen=True)
class GeneratedComment:
    text: str
    generator: str
    truncated: bool = False
    fallback: bool = False
    error: str | None = None


@dataclass(frozen=True)
class GeneratedCode:
    source: str
    generator: str
    truncated: bool = False
    fallback: bool = False
    error: str | None = None


@dataclass(frozen=True)
class ExpandedTuple:
    """A query/candidate pair with the candidate's comment and the query's generated code."""

    query: Query
    candidate: CodeSnippet
    comment: GeneratedComment
    gen_code: GeneratedCode


@dataclass(frozen=True, eq=False)
class EmbeddingVector:
    """A dense embedding. ``values`` is a read-only float32 array."""

    values: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        arr = np.array(self.values, dtype=np.float32).reshape(-1)
        if arr.size == 0:
            raise DimensionError("embedding vector must have at least one component")
        if not np.all(np.isfinite(arr)):
            raise DataError("embedding vector contains NaN or Inf")
        if self.normalized and abs(float(np.linalg.norm(arr.astype(np.float64))) - 1.0) >= 1e-6:
            raise DataError("vector flagged as normalized does not have unit norm")
        arr.setflags(write=False)
        object.__setattr__(self, "values", arr)

    @property
    def dim(self) -> int:
        return int(self.values.shape[0])

    @classmethod
    def normalize(cls, values: Iterable[float]) -> "EmbeddingVector":
        arr = np.asarray(list(values) if not isinstance(values, np.ndarray) else values, dtype=np.float64)
        norm = float(np.linalg.norm(arr))
        if norm == 0.0 or not math.isfinite(norm):
            raise DegenerateVectorError("cannot normalize a zero or non-finite vector")
        unit = (arr / norm).astype(np.float32)
        # float32 rounding can leave the norm a few ulps away from 1; one more pass settles it
        unit = (unit / np.float32(np.linalg.norm(unit.astype(np.float64)))).astype(np.float32)
        return cls(unit, normalized=True)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, EmbeddingVector):
            return NotImplemented
        return self.normalized == other.normalized and self.values.tobytes() == other.values.tobytes()

    def __hash__(self) -> int:
        return hash(self.values.tobytes())


@dataclass(frozen=True)
class SchemaScores:
    s_qc: float
    s_qm: float
    s_cg: float

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.s_qc, self.s_qm, self.s_cg)

    def get(self, schema: str) -> float:
        return self.as_tuple()[SCHEMAS.index(schema)]


@dataclass(frozen=True)
class FusionWeights:
    """Linear fusion weights, constrained to the probability simplex."""

    alpha: float
    beta: float
    gamma: float
    origin: str = "manual"

    def __post_init__(self):
        ws = (self.alpha, self.beta, self.gamma)
        if any(not math.isfinite(w) or w < 0.0 or w > 1.0 for w in ws):
            raise InvalidWeightsError(f"weights must lie in [0, 1], got {ws}")
        if abs(sum(ws) - 1.0) > _SIMPLEX_TOL:
            raise InvalidWeightsError(f"weights must sum to 1, got {ws} (sum {sum(ws)!r})")
        if self.origin not in WEIGHT_ORIGINS:
            raise InvalidWeightsError(f"unknown weight origin {self.origin!r}")

    @classmethod
    def default(cls) -> "FusionWeights":
        return cls(0.65, 0.25, 0.10, origin="default")

    @classmethod
    def unit(cls, schema: str) -> "FusionWeights":
        ws = [0.0, 0.0, 0.0]
        ws[SCHEMAS.index(schema)] = 1.0
        return cls(*ws, origin="manual")

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.alpha, self.beta, self.gamma)


@dataclass(frozen=True)
class RankedItem:
    candidate_id: str
    fused_score: float
    schema_scores: SchemaScores
    rank: int


@dataclass(frozen=True)
class RankedResult:
    query_id: str
    items: tuple[RankedItem, ...] = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "items", tuple(self.items))

    @property
    def ids(self) -> list[str]:
        return [it.candidate_id for it in self.items]

    def rank_of(self, candidate_id: str) -> int | None:
        for it in self.items:
            if it.candidate_id == candidate_id:
                return it.rank
        return None

    def truncate(self, top_k: int) -> "RankedResult":
        return RankedResult(self.query_id, self.items[:top_k])

    def to_dict(self) -> dict:
        return {
            "query_id": self.query_id,
            "results": [
                {
                    "rank": it.rank,
                    "candidate_id": it.candidate_id,
                    "fused_score": it.fused_score,
                    "s_qc": it.schema_scores.s_qc,
                    "s_qm": it.schema_scores.s_qm,
                    "s_cg": it.schema_scores.s_cg,
                }
                for it in self.items
            ],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "RankedResult":
        items = [
            RankedItem(
                r["candidate_id"],
                r["fused_score"],
                SchemaScores(r["s_qc"], r["s_qm"], r["s_cg"]),
                r["rank"],
            )
            for r in data["results"]
        ]
        return cls(data["query_id"], tuple(items))


def cosine_similarity(a: EmbeddingVector, b: EmbeddingVector) -> float:
    """Cosine of the angle between ``a`` and ``b``, clipped to [-1, 1]."""
    if a.dim != b.dim:
        raise DimensionError(f"dimension mismatch: {a.dim} vs {b.dim}")
    x = a.values.astype(np.float64)
    y = b.values.astype(np.float64)
    nx = float(np.linalg.norm(x))
    ny = float(np.linalg.norm(y))
    if nx == 0.0 or ny == 0.0:
        raise DegenerateVectorError("cosine similarity is undefined for a zero vector")
    cos = float(np.dot(x, y)) / (nx * ny)
    return min(1.0, max(-1.0, cos))


def schema_scores(
    q_vec: EmbeddingVector,
    c_vec: EmbeddingVector,
    m_vec: EmbeddingVector,
    g_vec: EmbeddingVector,
    *,
    q_vec_qm: EmbeddingVector | None = None,
    c_vec_cg: EmbeddingVector | None = None,
) -> SchemaScores:
    """Score one expanded tuple under the three matching schemas.

    When the query-comment or code-code schema runs in a different embedding
    space than query-code, pass that space's query/code vectors through
    ``q_vec_qm`` / ``c_vec_cg``; otherwise ``q_vec`` and ``c_vec`` are reused.
    """
    pairs = {
        "qc": (q_vec, c_vec),
        "qm": (q_vec_qm if q_vec_qm is not None else q_vec, m_vec),
        "cg": (c_vec_cg if c_vec_cg is not None else c_vec, g_vec),
    }
    out = []
    for schema, (x, y) in pairs.items():
        try:
            out.append(cosine_similarity(x, y))
        except DataError as exc:
            raise type(exc)(f"schema {schema}: {exc}") from exc
    return SchemaScores(*out)


def fuse_linear(scores: SchemaScores, w: FusionWeights) -> float:
    return w.alpha * scores.s_qc + w.beta * scores.s_qm + w.gamma * scores.s_cg


def ranked_from_scores(query_id: str, rows: Sequence[tuple[str, float, SchemaScores]]) -> RankedResult:
    """Order ``(candidate_id, fused, schema_scores)`` rows by fused score, ties by id."""
    seen: set[str] = set()
    for cid, _, _ in rows:
        if cid in seen:
            raise DuplicateCandidateError(f"duplicate candidate id {cid!r}")
        seen.add(cid)
    ordered = sorted(rows, key=lambda r: (-r[1], r[0]))
    items = tuple(RankedItem(cid, fused, sc, i + 1) for i, (cid, fused, sc) in enumerate(ordered))
    return RankedResult(query_id, items)


def rank_candidates(
    per_candidate: Sequence[tuple[str, SchemaScores]],
    w: FusionWeights,
    query_id: str = "",
) -> RankedResult:
    rows = [(cid, fuse_linear(sc, w), sc) for cid, sc in per_candidate]
    return ranked_from_scores(query_id, rows)
