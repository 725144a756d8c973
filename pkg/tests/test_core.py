import math
import random

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from crossfind.core import (
    CodeSnippet,
    EmbeddingVector,
    FusionWeights,
    Query,
    SchemaScores,
    cosine_similarity,
    fuse_linear,
    rank_candidates,
    schema_scores,
)
from crossfind.errors import (
    DataError,
    DegenerateVectorError,
    DimensionError,
    DuplicateCandidateError,
    InvalidWeightsError,
)


def ev(*xs):
    return EmbeddingVector(np.array(xs, dtype=np.float64))


finite = st.floats(-100, 100, allow_nan=False, allow_infinity=False, width=32)
vec3 = st.lists(finite, min_size=3, max_size=3).filter(lambda v: sum(x * x for x in v) > 1e-6)


def test_cosine_examples():
    assert cosine_similarity(ev(1, 0), ev(1, 0)) == 1.0
    assert cosine_similarity(ev(1, 0), ev(0, 1)) == 0.0
    # (3*4 + 4*3) / (5*5)
    assert cosine_similarity(ev(3, 4), ev(4, 3)) == pytest.approx(0.96, abs=1e-12)


def test_cosine_errors():
    with pytest.raises(DimensionError):
        cosine_similarity(ev(1, 0), ev(1, 0, 0))
    with pytest.raises(DegenerateVectorError):
        cosine_similarity(ev(0, 0), ev(1, 0))


@given(vec3, vec3)
def test_cosine_symmetric_and_bounded(a, b):
    x, y = ev(*a), ev(*b)
    c = cosine_similarity(x, y)
    assert c == cosine_similarity(y, x)
    assert -1.0 <= c <= 1.0


@given(vec3, vec3, st.floats(0.01, 100))
def test_cosine_scale_invariant(a, b, k):
    scaled = EmbeddingVector(np.asarray(a, dtype=np.float64) * k)
    # float32 storage of the scaled vector limits how exact this can be
    assert cosine_similarity(scaled, ev(*b)) == pytest.approx(cosine_similarity(ev(*a), ev(*b)), abs=1e-6)


def test_cosine_scale_invariant_exact_powers_of_two():
    a, b = ev(0.3, -1.2, 2.5), ev(1.0, 0.5, -0.25)
    for k in (0.5, 2.0, 8.0):
        scaled = EmbeddingVector(a.values * np.float32(k))
        assert cosine_similarity(scaled, b) == pytest.approx(cosine_similarity(a, b), abs=1e-9)


def test_embedding_vector_invariants():
    v = EmbeddingVector.normalize([3.0, 4.0])
    assert v.normalized and v.dim == 2
    assert abs(np.linalg.norm(v.values.astype(np.float64)) - 1) < 1e-6
    with pytest.raises(DataError):
        EmbeddingVector(np.array([np.nan, 1.0]))
    with pytest.raises(DataError):
        EmbeddingVector(np.array([2.0, 0.0]), normalized=True)
    with pytest.raises(DegenerateVectorError):
        EmbeddingVector.normalize([0.0, 0.0])
    assert not v.values.flags.writeable


def test_domain_type_validation():
    with pytest.raises(DataError):
        Query("q", "   ", "sql")
    with pytest.raises(DataError):
        CodeSnippet("c", "", "sql")


def test_schema_scores_examples():
    same = ev(0.2, 0.7)
    assert schema_scores(same, same, same, same).as_tuple() == pytest.approx((1.0, 1.0, 1.0))
    s = schema_scores(ev(1, 0), ev(0, 1), ev(1, 0), ev(0, 1))
    assert s.as_tuple() == (0.0, 1.0, 1.0)


def test_schema_scores_random_matches_hand_cosines(rng):
    q, c, m, g = (rng.standard_normal(5) for _ in range(4))

    def cos(a, b):
        a = np.asarray(EmbeddingVector(a).values, dtype=np.float64)
        b = np.asarray(EmbeddingVector(b).values, dtype=np.float64)
        return sum(x * y for x, y in zip(a, b)) / math.sqrt(sum(a * a) * sum(b * b))

    s = schema_scores(*(EmbeddingVector(v) for v in (q, c, m, g)))
    assert s.as_tuple() == pytest.approx((cos(q, c), cos(q, m), cos(c, g)), abs=1e-12)


def test_schema_scores_names_failing_schema():
    with pytest.raises(DimensionError, match="schema qm"):
        schema_scores(ev(1, 0), ev(1, 0), ev(1, 0, 0), ev(1, 0))


def test_schema_scores_separate_spaces():
    s = schema_scores(ev(1, 0), ev(1, 0), ev(0, 0, 1), ev(0, 1, 0), q_vec_qm=ev(0, 0, 1), c_vec_cg=ev(0, 1, 0))
    assert s.as_tuple() == (1.0, 1.0, 1.0)


def test_fuse_linear_examples():
    assert fuse_linear(SchemaScores(0.7, 0.2, 0.9), FusionWeights(1, 0, 0)) == 0.7
    assert fuse_linear(SchemaScores(1, 1, 1), FusionWeights.default()) == pytest.approx(1.0)
    # 0.65*0.4 + 0.25*0.8 + 0.10*0.2
    assert fuse_linear(SchemaScores(0.4, 0.8, 0.2), FusionWeights.default()) == pytest.approx(0.48, abs=1e-12)


def test_fusion_weights_validation():
    assert FusionWeights.default().as_tuple() == (0.65, 0.25, 0.10)
    assert FusionWeights.default().origin == "default"
    with pytest.raises(InvalidWeightsError):
        FusionWeights(0.5, 0.5, 0.5)
    with pytest.raises(InvalidWeightsError):
        FusionWeights(1.2, -0.2, 0.0)
    with pytest.raises(InvalidWeightsError):
        FusionWeights(1, 0, 0, origin="guessed")


def test_rank_candidates_examples():
    r = rank_candidates([("a", SchemaScores(0.1, 0.1, 0.1)), ("b", SchemaScores(0.9, 0.9, 0.9))], FusionWeights.default())
    assert r.ids == ["b", "a"] and [it.rank for it in r.items] == [1, 2]
    tie = rank_candidates([("z", SchemaScores(0.5, 0, 0)), ("a", SchemaScores(0.5, 0, 0))], FusionWeights(1, 0, 0))
    assert tie.ids == ["a", "z"]
    with pytest.raises(DuplicateCandidateError):
        rank_candidates([("a", SchemaScores(0, 0, 0))] * 2, FusionWeights.default())


def test_rank_candidates_matches_full_sort_oracle(rng):
    w = FusionWeights.default()
    rows = [(f"id{i}", SchemaScores(*rng.uniform(-1, 1, 3))) for i in range(10)]
    expected = sorted(rows, key=lambda r: (-(0.65 * r[1].s_qc + 0.25 * r[1].s_qm + 0.10 * r[1].s_cg), r[0]))
    assert rank_candidates(rows, w).ids == [cid for cid, _ in expected]


scores3 = st.tuples(*(st.floats(-1, 1, allow_nan=False) for _ in range(3)))
weights_st = st.tuples(st.integers(0, 20), st.integers(0, 20)).filter(lambda t: t[0] + t[1] <= 20).map(
    lambda t: FusionWeights(t[0] / 20, t[1] / 20, (20 - t[0] - t[1]) / 20)
)


@settings(max_examples=60)
@given(st.lists(scores3, min_size=1, max_size=12), weights_st, st.randoms(use_true_random=False))
def test_rank_properties(score_list, w, rnd):
    rows = [(f"c{i:02d}", SchemaScores(*s)) for i, s in enumerate(score_list)]
    ranked = rank_candidates(rows, w)
    fused = [it.fused_score for it in ranked.items]
    assert fused == sorted(fused, reverse=True)
    assert [it.rank for it in ranked.items] == list(range(1, len(rows) + 1))
    shuffled = rows[:]
    rnd.shuffle(shuffled)
    assert rank_candidates(shuffled, w).ids == ranked.ids


@settings(max_examples=60)
@given(st.lists(scores3, min_size=2, max_size=10), st.integers(0, 2), st.floats(0.0, 0.5))
def test_unit_weight_degeneracy_and_monotonicity(score_list, schema_idx, bump):
    rows = [(f"c{i:02d}", SchemaScores(*s)) for i, s in enumerate(score_list)]
    schema = ("qc", "qm", "cg")[schema_idx]
    ranked = rank_candidates(rows, FusionWeights.unit(schema))
    by_schema = sorted(rows, key=lambda r: (-r[1].get(schema), r[0]))
    assert ranked.ids == [cid for cid, _ in by_schema]

    # raising one score of one candidate never lowers its rank
    w = FusionWeights(0.5, 0.3, 0.2)
    before = rank_candidates(rows, w).rank_of("c00")
    s = rows[0][1].as_tuple()
    raised = list(s)
    raised[schema_idx] += bump
    after = rank_candidates([("c00", SchemaScores(*raised))] + rows[1:], w).rank_of("c00")
    assert after <= before


def test_ranked_result_dict_roundtrip():
    r = rank_candidates([("a", SchemaScores(0.1, 0.2, 0.3)), ("b", SchemaScores(0.3, 0.2, 0.1))], FusionWeights.default(), "q")
    from crossfind.core import RankedResult

    assert RankedResult.from_dict(r.to_dict()) == r


def test_core_is_thread_safe():
    from concurrent.futures import ThreadPoolExecutor

    rows = [(f"c{i}", SchemaScores(random.random(), random.random(), random.random())) for i in range(200)]
    w = FusionWeights.default()
    expected = rank_candidates(rows, w)
    with ThreadPoolExecutor(8) as pool:
        results = list(pool.map(lambda _: rank_candidates(rows, w), range(32)))
    assert all(r == expected for r in results)
