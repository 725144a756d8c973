"""Evaluation harness: MRR, top-k accuracy and schema complementarity."""

from __future__ import annotations

import csv
import io
import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from crossfind.core import SCHEMAS, CodeSnippet, FusionWeights, Query, RankedResult
from crossfind.errors import CrossfindError, DataError, EvalInputError
from crossfind.fusion import STRATEGIES
from crossfind.indexer import CodebaseIndex
from crossfind.providers import ProviderSet
from crossfind.search import rank_scores, score_query

TOP_KS = (1, 5, 10)


@dataclass(frozen=True)
class EvalItem:
    query: Query
    truth: frozenset[str]


@dataclass
class EvalDataset:
    items: list[EvalItem]
    codebase: list[CodeSnippet]
    dataset_id: str = ""

    def __post_init__(self):
        known = {s.id for s in self.codebase}
        qids = [it.query.id for it in self.items]
        if len(set(qids)) != len(qids):
            raise DataError("duplicate query ids in evaluation dataset")
        for it in self.items:
            missing = it.truth - known
            if missing:
                raise DataError(f"query {it.query.id}: ground truth {sorted(missing)} not in codebase")

    @property
    def truth(self) -> dict[str, frozenset[str]]:
        return {it.query.id: it.truth for it in self.items}


def read_pairs_jsonl(path: str | Path) -> list[dict]:
    """Read ``{"id", "query", "code", "language"}`` records; errors name the line."""
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                if not isinstance(rec, dict):
                    raise ValueError("expected a JSON object")
                for key in ("id", "code", "language"):
                    if not isinstance(rec.get(key), str):
                        raise ValueError(f"missing or non-string field {key!r}")
            except ValueError as exc:
                raise DataError(f"{path}: line {lineno}: {exc}") from exc
            records.append(rec)
    return records


def dataset_from_records(records: list[dict], dataset_id: str = "") -> EvalDataset:
    """Each record is a positive pair: its query's only truth is its own code."""
    items, codebase = [], []
    for i, rec in enumerate(records, 1):
        query = rec.get("query")
        if not isinstance(query, str):
            raise DataError(f"record {i} ({rec['id']}): missing 'query'")
        codebase.append(CodeSnippet(rec["id"], rec["code"], rec["language"]))
        items.append(EvalItem(Query(rec["id"], query, rec["language"]), frozenset([rec["id"]])))
    return EvalDataset(items, codebase, dataset_id)


def load_dataset(path: str | Path) -> EvalDataset:
    return dataset_from_records(read_pairs_jsonl(path), dataset_id=Path(path).stem)


# ---------------------------------------------------------------------------
# metrics


def truth_ranks(ranked: Sequence[RankedResult], truth: EvalDataset | Mapping[str, frozenset[str]]) -> dict[str, int | None]:
    """Best rank of any ground truth per query; ``None`` when no truth was ranked."""
    truth_map = truth.truth if isinstance(truth, EvalDataset) else truth
    by_query = {}
    for r in ranked:
        if r.query_id in by_query:
            raise EvalInputError(f"query {r.query_id} ranked twice")
        by_query[r.query_id] = r
    if set(by_query) != set(truth_map):
        extra = sorted(set(by_query) - set(truth_map))[:3]
        missing = sorted(set(truth_map) - set(by_query))[:3]
        raise EvalInputError(f"rankings and truth disagree on queries (extra {extra}, missing {missing})")
    out = {}
    for qid in sorted(truth_map):
        ranks = [r for r in (by_query[qid].rank_of(t) for t in truth_map[qid]) if r is not None]
        out[qid] = min(ranks) if ranks else None
    return out


def reciprocal_ranks(ranked, truth) -> dict[str, float]:
    return {q: (1.0 / r if r else 0.0) for q, r in truth_ranks(ranked, truth).items()}


def mrr(ranked: Sequence[RankedResult], truth) -> float:
    rr = reciprocal_ranks(ranked, truth)
    return sum(rr.values()) / len(rr) if rr else 0.0


def top_k_accuracy(ranked: Sequence[RankedResult], truth, k: int) -> float:
    ranks = truth_ranks(ranked, truth)
    if not ranks:
        return 0.0
    return sum(1 for r in ranks.values() if r is not None and r <= k) / len(ranks)


@dataclass
class EvalReport:
    mrr: float
    top_k: dict[int, float]
    per_query_rr: dict[str, float]
    timing_ms: dict[str, float] = field(default_factory=dict)

    def to_dict(self, include_timing: bool = True) -> dict:
        d = {
            "mrr": self.mrr,
            "top_k": {str(k): v for k, v in sorted(self.top_k.items())},
            "per_query_rr": dict(sorted(self.per_query_rr.items())),
        }
        if include_timing:
            d["timing_ms"] = self.timing_ms
        return d


def evaluate_rankings(ranked: Sequence[RankedResult], truth, ks: Sequence[int] = TOP_KS) -> EvalReport:
    ranks = truth_ranks(ranked, truth)
    n = len(ranks)
    rr = {q: (1.0 / r if r else 0.0) for q, r in ranks.items()}
    return EvalReport(
        mrr=sum(rr.values()) / n if n else 0.0,
        top_k={k: (sum(1 for r in ranks.values() if r is not None and r <= k) / n if n else 0.0) for k in ks},
        per_query_rr=rr,
    )


# ---------------------------------------------------------------------------
# complementarity


def region_label(members: Sequence[str]) -> str:
    return "&".join(members)


@dataclass
class ComplementarityReport:
    """Venn algebra over the queries each schema answers correctly at rank 1."""

    correct: dict[str, frozenset[str]]
    regions: dict[str, int]
    union: int

    def gain_over(self, base: str) -> int:
        """Queries some schema gets right at rank 1 that ``base`` misses."""
        everything = frozenset().union(*self.correct.values())
        return len(everything - self.correct[base])

    def gain_ratio(self, base: str) -> float | None:
        n = len(self.correct[base])
        return self.gain_over(base) / n if n else None

    def exclusive_gain(self, other: str, base: str) -> int:
        """Queries ``other`` gets right at rank 1 that ``base`` misses."""
        return len(self.correct[other] - self.correct[base])

    def to_dict(self) -> dict:
        names = list(self.correct)
        return {
            "correct_counts": {s: len(v) for s, v in self.correct.items()},
            "regions": self.regions,
            "union": self.union,
            "union_gain": {
                s: {"count": self.gain_over(s), "ratio": self.gain_ratio(s)} for s in names
            },
            "pairwise_gain": {
                f"{o}_over_{b}": self.exclusive_gain(o, b) for o in names for b in names if o != b
            },
        }


def complementarity_from_sets(correct: Mapping[str, set[str] | frozenset[str]]) -> ComplementarityReport:
    sets = {s: frozenset(v) for s, v in correct.items()}
    names = list(sets)
    everything = frozenset().union(*sets.values()) if sets else frozenset()
    regions = {}
    for size in range(1, len(names) + 1):
        for members in itertools.combinations(names, size):
            inside = frozenset.intersection(*(sets[m] for m in members))
            outside = frozenset().union(*(sets[o] for o in names if o not in members))
            regions[region_label(members)] = len(inside - outside)
    return ComplementarityReport(sets, regions, len(everything))


def complementarity(per_schema_rankings: Mapping[str, Sequence[RankedResult]], truth) -> ComplementarityReport:
    correct = {}
    for schema, ranked in per_schema_rankings.items():
        ranks = truth_ranks(ranked, truth)
        correct[schema] = {q for q, r in ranks.items() if r == 1}
    return complementarity_from_sets(correct)


# ---------------------------------------------------------------------------
# pipeline


@dataclass
class PipelineReport:
    fused: EvalReport
    per_schema: dict[str, EvalReport]
    strategies: dict[str, EvalReport]
    complementarity: ComplementarityReport
    weights: FusionWeights
    dataset_id: str = ""
    timing_ms: dict[str, float] = field(default_factory=dict)

    def to_dict(self, include_timing: bool = True) -> dict:
        d = {
            "dataset_id": self.dataset_id,
            "weights": list(self.weights.as_tuple()),
            "fused": self.fused.to_dict(include_timing=False),
            "per_schema": {s: r.to_dict(include_timing=False) for s, r in self.per_schema.items()},
            "strategies": {s: r.to_dict(include_timing=False) for s, r in self.strategies.items()},
            "complementarity": self.complementarity.to_dict(),
        }
        if include_timing:
            d["timing_ms"] = self.timing_ms
        return d

    def table(self) -> str:
        rows = [("method", "MRR", "top-1", "top-5", "top-10")]
        labels = {"qc": "query-code", "qm": "query-comment", "cg": "code-code"}
        for s, rep in self.per_schema.items():
            rows.append((labels.get(s, s), *_fmt(rep)))
        for s, rep in self.strategies.items():
            rows.append((f"fused:{s}", *_fmt(rep)))
        widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
        lines = ["  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths))) for r in rows]
        lines.insert(1, "  ".join("-" * w for w in widths))
        return "\n".join(lines)


def _fmt(rep: EvalReport) -> tuple[str, ...]:
    return (f"{rep.mrr:.3f}", *(f"{rep.top_k.get(k, 0.0):.3f}" for k in TOP_KS))


def _timing_stats(samples: list[float]) -> dict[str, float]:
    if not samples:
        return {}
    arr = np.asarray(samples)
    return {
        "mean": float(arr.mean()),
        "p50": float(np.percentile(arr, 50)),
        "p99": float(np.percentile(arr, 99)),
    }


def evaluate_pipeline(
    dataset: EvalDataset,
    index: CodebaseIndex,
    providers: ProviderSet,
    *,
    weights: FusionWeights | None = None,
    strategies: Sequence[str] = STRATEGIES,
    recall: int = 10,
) -> PipelineReport:
    """Score every query once, then rank it under each schema and strategy."""
    weights = weights or FusionWeights.default()
    for s in strategies:
        if s not in STRATEGIES:
            raise EvalInputError(f"unknown strategy {s!r}")
    scored = []
    per_query_ms = []
    for item in dataset.items:
        try:
            sq = score_query(item.query, index, providers)
        except CrossfindError as exc:
            try:
                annotated = type(exc)(f"query {item.query.id}: {exc}")
            except TypeError:
                raise exc from None
            raise annotated from exc
        scored.append((item.query.id, sq.scores))
        per_query_ms.append(sum(sq.timing.values()))

    def run(strategy: str, w: FusionWeights | None) -> EvalReport:
        ranked = [rank_scores(qid, index.ids, s, strategy, w, recall) for qid, s in scored]
        return evaluate_rankings(ranked, dataset)

    per_schema_ranked = {
        schema: [rank_scores(qid, index.ids, s, "linear", FusionWeights.unit(schema)) for qid, s in scored]
        for schema in SCHEMAS
    }
    per_schema = {schema: evaluate_rankings(r, dataset) for schema, r in per_schema_ranked.items()}
    strat_reports = {s: run(s, weights if s == "linear" else None) for s in strategies}
    fused = strat_reports["linear"] if "linear" in strat_reports else run("linear", weights)
    return PipelineReport(
        fused=fused,
        per_schema=per_schema,
        strategies=strat_reports,
        complementarity=complementarity(per_schema_ranked, dataset),
        weights=weights,
        dataset_id=dataset.dataset_id,
        timing_ms=_timing_stats(per_query_ms),
    )


def ranks_csv(report: EvalReport) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["query_id", "reciprocal_rank"])
    for qid, rr in sorted(report.per_query_rr.items()):
        writer.writerow([qid, rr])
    return buf.getvalue()
