"""Score aggregation: calibrated linear fusion and the classic baselines.

The linear strategy's weights are chosen by exhaustive search over a simplex
lattice, maximising top-10 accuracy on a sampled calibration set whose
schema scores were computed once up front. CombSUM, CombMNZ, RRF and Borda
operate on per-schema run lists and are provided for comparison.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from crossfind.core import FusionWeights
from crossfind.errors import CalibrationDataError, ParameterError

TIE_RULE = "larger alpha, then larger beta"
STRATEGIES = ("linear", "combsum", "combmnz", "rrf", "borda")
RRF_K = 60.0


# ---------------------------------------------------------------------------
# run lists and baselines


@dataclass(frozen=True)
class RunList:
    """One schema's ranking for one query: ``(candidate_id, score, rank)`` rows."""

    entries: tuple[tuple[str, float, int], ...]

    def __post_init__(self):
        entries = tuple(self.entries)
        object.__setattr__(self, "entries", entries)
        for i, (_, _, rank) in enumerate(entries):
            if rank != i + 1:
                raise ParameterError("run ranks must be 1-based and contiguous")
        for (_, a, _), (_, b, _) in zip(entries, entries[1:]):
            if b > a:
                raise ParameterError("run scores must be non-increasing")

    @classmethod
    def from_scores(cls, scores: Mapping[str, float] | Iterable[tuple[str, float]]) -> "RunList":
        pairs = list(scores.items()) if isinstance(scores, Mapping) else list(scores)
        ordered = sorted(pairs, key=lambda p: (-p[1], p[0]))
        return cls(tuple((cid, float(s), i + 1) for i, (cid, s) in enumerate(ordered)))

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)


def _universe(runs: Sequence[RunList]) -> list[str]:
    return sorted({cid for run in runs for cid, _, _ in run})


def _ordered(scores: dict[str, float], present: set[str] | None = None) -> list[tuple[str, float]]:
    # candidates retrieved by no run always sort after retrieved ones
    if present is None:
        return sorted(scores.items(), key=lambda p: (-p[1], p[0]))
    return sorted(scores.items(), key=lambda p: (p[0] not in present, -p[1], p[0]))


def _check_recall(recall: int) -> None:
    if recall < 1:
        raise ParameterError(f"recall must be >= 1, got {recall}")


def _top_scores(runs: Sequence[RunList], recall: int) -> dict[str, list[float]]:
    _check_recall(recall)
    terms: dict[str, list[float]] = {cid: [] for cid in _universe(runs)}
    for run in runs:
        for cid, score, rank in run:
            if rank <= recall:
                terms[cid].append(score)
    return terms


def combsum(runs: Sequence[RunList], recall: int = 10) -> list[tuple[str, float]]:
    """Sum of each candidate's scores over the runs where it made the top ``recall``."""
    terms = _top_scores(runs, recall)
    # fsum is order independent, so equal score multisets tie exactly
    present = {cid for cid, t in terms.items() if t}
    return _ordered({cid: math.fsum(t) for cid, t in terms.items()}, present)


def combmnz(runs: Sequence[RunList], recall: int = 10) -> list[tuple[str, float]]:
    """CombSUM multiplied by the number of runs retrieving the candidate."""
    terms = _top_scores(runs, recall)
    present = {cid for cid, t in terms.items() if t}
    return _ordered({cid: math.fsum(t) * len(t) for cid, t in terms.items()}, present)


def rrf(runs: Sequence[RunList], k_const: float = RRF_K) -> list[tuple[str, float]]:
    if k_const < 0:
        raise ParameterError("k_const must be non-negative")
    terms: dict[str, list[float]] = {cid: [] for cid in _universe(runs)}
    for run in runs:
        for cid, _, rank in run:
            terms[cid].append(1.0 / (k_const + rank))
    return _ordered({cid: math.fsum(t) for cid, t in terms.items()})


def borda(runs: Sequence[RunList]) -> list[tuple[str, float]]:
    universe = _universe(runs)
    n = len(universe)
    totals = dict.fromkeys(universe, 0.0)
    for run in runs:
        for cid, _, rank in run:
            totals[cid] += float(n - rank)
    return _ordered(totals)


def fuse_runs(strategy: str, runs: Sequence[RunList], recall: int = 10, k_const: float = RRF_K):
    if strategy == "combsum":
        return combsum(runs, recall)
    if strategy == "combmnz":
        return combmnz(runs, recall)
    if strategy == "rrf":
        return rrf(runs, k_const)
    if strategy == "borda":
        return borda(runs)
    raise ParameterError(f"unknown rank-fusion strategy {strategy!r}")


# ---------------------------------------------------------------------------
# calibration


@dataclass(frozen=True)
class QueryScores:
    """Precomputed schema scores of every candidate for one calibration query.

    ``scores`` has shape ``(n_candidates, 3)`` in ``(qc, qm, cg)`` order.
    """

    query_id: str
    candidate_ids: tuple[str, ...]
    scores: np.ndarray
    positives: frozenset[str]

    def __post_init__(self):
        object.__setattr__(self, "candidate_ids", tuple(self.candidate_ids))
        object.__setattr__(self, "positives", frozenset(self.positives))
        scores = np.asarray(self.scores, dtype=np.float64)
        if scores.shape != (len(self.candidate_ids), 3):
            raise CalibrationDataError(
                f"query {self.query_id}: scores shape {scores.shape} does not match "
                f"{len(self.candidate_ids)} candidates"
            )
        if not self.positives <= set(self.candidate_ids):
            raise CalibrationDataError(f"query {self.query_id}: positive id missing from its codebase slice")
        if len(set(self.candidate_ids)) != len(self.candidate_ids):
            raise CalibrationDataError(f"query {self.query_id}: duplicate candidate ids")
        object.__setattr__(self, "scores", scores)


def lattice_size(step: float) -> int:
    n = _divisions(step)
    return (n + 1) * (n + 2) // 2


def _divisions(step: float) -> int:
    if not 0 < step <= 1:
        raise ParameterError(f"step must be in (0, 1], got {step}")
    n = round(1.0 / step)
    if abs(n * step - 1.0) > 1e-9:
        raise ParameterError(f"step {step} does not divide 1 evenly")
    return n


def simplex_grid(step: float) -> list[tuple[int, int, int]]:
    """Integer lattice points ``(i, j, k)`` with ``i + j + k = 1/step``."""
    n = _divisions(step)
    return [(i, j, n - i - j) for i in range(n, -1, -1) for j in range(n - i, -1, -1)]


def positive_ranks(sample: QueryScores, weight_grid: np.ndarray) -> np.ndarray:
    """Best rank of any positive under each weight row of ``weight_grid`` (shape ``(G, 3)``).

    Ranking follows :func:`crossfind.core.rank_candidates`: fused score
    descending, ties by candidate id ascending.
    """
    s = sample.scores
    # same operation order as fuse_linear so fused values match it bit for bit
    fused = (
        s[:, 0:1] * weight_grid[:, 0][None, :]
        + s[:, 1:2] * weight_grid[:, 1][None, :]
        + s[:, 2:3] * weight_grid[:, 2][None, :]
    )
    best = np.full(weight_grid.shape[0], np.iinfo(np.int64).max, dtype=np.int64)
    ids = sample.candidate_ids
    for pid in sample.positives:
        p = ids.index(pid)
        fp = fused[p]
        before = np.array([cid < pid for cid in ids])
        rank = 1 + (fused > fp).sum(axis=0) + ((fused == fp) & before[:, None]).sum(axis=0)
        best = np.minimum(best, rank)
    return best


def _objective(ranks: np.ndarray, metric: str, k: int) -> np.ndarray:
    if metric == "top_k":
        return (ranks <= k).mean(axis=0)
    if metric == "mrr":
        return (1.0 / ranks).mean(axis=0)
    raise ParameterError(f"unknown objective {metric!r}")


@dataclass(frozen=True)
class SurfacePoint:
    alpha: float
    beta: float
    gamma: float
    objective: float


@dataclass
class CalibrationReport:
    best_weights: FusionWeights
    grid_step: float
    objective_name: str
    best_objective: float
    surface: list[SurfacePoint] = field(default_factory=list)
    sampling_dataset_id: str = ""
    n_queries: int = 0
    tie_break: str = TIE_RULE

    @property
    def grid_points(self) -> int:
        return len(self.surface)

    def to_dict(self) -> dict:
        return {
            "best_weights": {
                "alpha": self.best_weights.alpha,
                "beta": self.best_weights.beta,
                "gamma": self.best_weights.gamma,
                "origin": self.best_weights.origin,
            },
            "best_objective": self.best_objective,
            "objective": self.objective_name,
            "grid_step": self.grid_step,
            "grid_points": self.grid_points,
            "n_queries": self.n_queries,
            "sampling_dataset_id": self.sampling_dataset_id,
            "tie_break": self.tie_break,
            "surface": [[p.alpha, p.beta, p.gamma, p.objective] for p in self.surface],
        }

    def surface_csv(self) -> str:
        return surface_to_csv(self.surface)


def surface_to_csv(surface: Sequence[SurfacePoint]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["alpha", "beta", "gamma", "objective"])
    for p in surface:
        writer.writerow([p.alpha, p.beta, p.gamma, p.objective])
    return buf.getvalue()


def sweep_weights(
    samples: Sequence[QueryScores],
    step: float = 0.01,
    *,
    metric: str = "top_k",
    k: int = 10,
) -> list[SurfacePoint]:
    """Evaluate every simplex lattice point; returns the whole objective surface."""
    if not samples:
        raise CalibrationDataError("calibration set is empty")
    n = _divisions(step)
    lattice = simplex_grid(step)
    grid = np.array([(i / n, j / n, l / n) for i, j, l in lattice], dtype=np.float64)
    ranks = np.stack([positive_ranks(s, grid) for s in samples])
    values = _objective(ranks, metric, k)
    return [SurfacePoint(float(a), float(b), float(g), float(v)) for (a, b, g), v in zip(grid, values)]


def calibrate(
    samples: Sequence[QueryScores],
    step: float = 0.05,
    *,
    k: int = 10,
    dataset_id: str = "",
) -> CalibrationReport:
    """Grid-search the fusion weights that maximise mean top-``k`` accuracy.

    Ties on the objective go to the larger alpha, then the larger beta.
    """
    surface = sweep_weights(samples, step, metric="top_k", k=k)
    best = max(surface, key=lambda p: (p.objective, p.alpha, p.beta))
    weights = FusionWeights(best.alpha, best.beta, best.gamma, origin="calibrated")
    return CalibrationReport(
        best_weights=weights,
        grid_step=step,
        objective_name=f"top_{k}_accuracy",
        best_objective=best.objective,
        surface=surface,
        sampling_dataset_id=dataset_id,
        n_queries=len(samples),
    )


def equal_weights() -> FusionWeights:
    third = 1.0 / 3.0
    return FusionWeights(third, third, 1.0 - 2 * third)

