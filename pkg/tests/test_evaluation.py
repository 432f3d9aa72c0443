import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from qrqa.data_io import RankedList, RunEntry
from qrqa.evaluation import (
    RECALL_LEVELS,
    EvalConfig,
    answer_em,
    answer_f1,
    average_precision,
    evaluate_extractive,
    evaluate_rewrite,
    evaluate_run,
    interpolated_precision,
    ndcg_at_k,
    pr_curve,
    precision_at_1,
    query_pr_points,
    reciprocal_rank,
    rewrite_exact_match,
    rouge1_recall,
    similarity,
)


def ranked(pids, qid="q", scores=None):
    scores = scores or [float(len(pids) - i) for i in range(len(pids))]
    return RankedList(qid, [RunEntry(p, r, s) for r, (p, s) in enumerate(zip(pids, scores), 1)])


def test_rouge_examples():
    assert rouge1_recall("what is the gdp", "what is the gdp") == 1.0
    assert rouge1_recall("what is the gdp of xi'an", "what is xi'an's gdp") == pytest.approx(0.75, abs=1e-6)
    assert rouge1_recall("a b", "c d") == 0.0
    assert rouge1_recall("", "") == 1.0 and rouge1_recall("x", "") == 0.0


def test_rouge_clips_repeats():
    assert rouge1_recall("the the the", "the cat") == 0.5


def test_rewrite_em_normalized():
    assert rewrite_exact_match("What is the GDP?", "what is the gdp") == 1
    assert rewrite_exact_match("what is gdp", "what is the gdp") == 0
    r = evaluate_rewrite("a b", "a b")
    assert (r.rouge1_recall, r.exact_match, r.similarity) == (1.0, 1, pytest.approx(1.0))


def test_similarity_examples():
    assert similarity("x y", "x y") == pytest.approx(1.0)
    assert similarity("x y", "z w") == 0.0
    assert similarity("a b", "a c") == pytest.approx(0.5, abs=1e-12)
    assert similarity("", "a") == 0.0
    assert similarity("u", "v", embedder=lambda t: [1.0, 0.0] if t == "u" else [1.0, 1.0]) == pytest.approx(
        1 / math.sqrt(2))


def test_answer_metrics_examples():
    assert answer_em("Shaanxi, China", "shaanxi china") == 1
    assert answer_f1("Shaanxi, China", "shaanxi china") == 1.0
    assert answer_f1("in shaanxi china", "shaanxi china") == pytest.approx(0.8, abs=1e-6)
    assert answer_em(None, "x") == 0 and answer_f1(None, "x") == 0.0
    assert answer_em(None, None) == 1 and answer_f1(None, None) == 1.0
    assert answer_f1("the", "a") == 1.0  # both normalize to empty


@given(st.text(max_size=20), st.text(max_size=20))
def test_answer_f1_symmetric(a, b):
    assert answer_f1(a, b) == pytest.approx(answer_f1(b, a))
    assert answer_em(a, a) == 1
    assert 0 <= answer_f1(a, b) <= 1


def test_evaluate_extractive_na_subset():
    ev = evaluate_extractive({"a": "x", "b": None, "c": "y"}, {"a": "x", "b": None, "c": None})
    assert ev.em == pytest.approx(2 / 3)
    assert ev.na_acc == 0.5 and ev.na_count == 2
    with pytest.raises(KeyError):
        evaluate_extractive({}, {"a": "x"})


def test_per_query_examples():
    judged = {"r1": 2, "r2": 3, "n": 1}
    assert reciprocal_rank(ranked(["x", "y", "z", "r1"]), judged) == 0.25
    assert average_precision(ranked(["r1", "x", "r2"]), judged) == pytest.approx(0.833333, abs=1e-6)
    assert average_precision(ranked(["r1"]), judged) == 0.5  # normalized by all relevant in qrels
    assert precision_at_1(ranked(["n", "r1"]), judged) == 0
    assert precision_at_1(ranked(["r1"]), judged) == 1


def test_ndcg_examples():
    judged = {"a": 3, "c": 1}
    assert ndcg_at_k(ranked(["a", "b", "c"]), judged) == pytest.approx(0.9639, abs=1e-4)
    dcg, idcg = 3 + 0 + 1 / 2, 3 + 1 / math.log2(3)
    assert ndcg_at_k(ranked(["a", "b", "c"]), judged) == pytest.approx(dcg / idcg, abs=1e-12)
    assert ndcg_at_k(ranked(["a", "c"]), judged) == 1.0
    assert ndcg_at_k(ranked(["x", "y", "z", "a"]), judged) == 0.0
    assert ndcg_at_k(ranked(["a"]), {"a": 0}) is None
    with pytest.raises(ValueError):
        ndcg_at_k(ranked(["a"]), judged, k=0)


def test_ndcg_binarize_switch():
    judged = {"a": 3, "c": 1}
    assert ndcg_at_k(ranked(["c", "a"]), judged, binarize=True) == pytest.approx(1 / math.log2(3))


def test_fixture_suite():
    # hand-derived: q1 relevant at ranks 2,3 of 3 relevant; q2 relevant at rank 1 of 1
    qrels = {"q1": {"a": 2, "b": 4, "c": 2, "z": 0}, "q2": {"k": 3, "m": 1}, "q3": {"x": 2}}
    run = [ranked(["n", "a", "b", "z"], "q1"), ranked(["k", "m"], "q2")]
    ev = evaluate_run(run, qrels)
    ap1 = (1 / 2 + 2 / 3) / 3
    assert ev.map == pytest.approx((ap1 + 1.0) / 2, abs=1e-6)
    assert ev.mrr == pytest.approx((0.5 + 1.0) / 2, abs=1e-6)
    assert ev.p1 == pytest.approx(0.5, abs=1e-6)
    n1 = (0 + 2 / math.log2(3) + 4 / 2) / (4 + 2 / math.log2(3) + 2 / 2)
    n2 = (3 + 1 / math.log2(3)) / (3 + 1 / math.log2(3))
    assert ev.ndcg3 == pytest.approx((n1 + n2) / 2, abs=1e-6)
    assert ev.missing_in_run == ["q3"]


def test_evaluate_run_averages_and_errors():
    qrels = {"a": {"r": 2}, "b": {"r": 2}}
    assert evaluate_run([ranked(["r"], "a")], qrels).mrr == 1.0
    run = [ranked(["x", "r"], "a"), ranked(["x", "x2", "x3", "x4", "r"], "b")]
    assert evaluate_run(run, qrels).mrr == pytest.approx((0.5 + 0.2) / 2)
    with pytest.raises(ValueError):
        evaluate_run([ranked(["r"], "zz")], qrels)


def test_ndcg_exclusion_reported():
    qrels = {"a": {"r": 2}, "b": {"r": 0}}
    ev = evaluate_run([ranked(["r"], "a"), ranked(["r"], "b")], qrels)
    assert ev.ndcg_excluded == ["b"] and ev.ndcg3 == 1.0
    assert ev.map == 0.5  # the query without relevant passages still counts in MAP


def brute_ap(pids, relevant):
    precs = [sum(p in relevant for p in pids[:r]) / r for r in range(1, len(pids) + 1) if pids[r - 1] in relevant]
    return sum(precs) / len(relevant) if relevant else 0.0


@st.composite
def run_and_qrels(draw):
    n = draw(st.integers(1, 12))
    pids = draw(st.permutations([f"p{i}" for i in range(15)]))[:n]
    judged = {f"p{i}": draw(st.integers(0, 4)) for i in draw(st.sets(st.integers(0, 14), max_size=10))}
    return pids, judged


@settings(max_examples=200, deadline=None)
@given(run_and_qrels())
def test_metric_properties(case):
    pids, judged = case
    rl = ranked(pids)
    m = {
        "ap": average_precision(rl, judged), "rr": reciprocal_rank(rl, judged),
        "p1": precision_at_1(rl, judged), "ndcg": ndcg_at_k(rl, judged),
    }
    for v in m.values():
        assert v is None or 0 <= v <= 1 + 1e-12
    relevant = {p for p, g in judged.items() if g >= 2}
    assert m["ap"] == pytest.approx(brute_ap(pids, relevant))
    # rank-only: rescaling scores changes nothing
    scaled = ranked(pids, scores=[7.5 * e.score + 100 for e in rl.entries])
    assert ndcg_at_k(scaled, judged) == m["ndcg"]
    assert average_precision(scaled, judged) == m["ap"]


@settings(max_examples=100, deadline=None)
@given(run_and_qrels(), st.randoms(use_true_random=False))
def test_permutation_below_depth(case, rnd):
    pids, judged = case
    depth = 3
    tail = pids[depth:]
    rnd.shuffle(tail)
    a, b = ranked(pids), ranked(pids[:depth] + tail)
    for f in (average_precision, reciprocal_rank, precision_at_1):
        assert f(a, judged, depth=depth) == f(b, judged, depth=depth)
    assert ndcg_at_k(a, judged, k=3) == ndcg_at_k(b, judged, k=3)


def test_pr_perfect_single_relevant():
    curve = pr_curve([ranked(["r", "x", "y"])], {"q": {"r": 2}})
    assert [p for _, p in curve] == [1.0] * 11
    assert [r for r, _ in curve] == list(RECALL_LEVELS)


def test_pr_five_doc_enumeration():
    pids = ["a", "x", "b", "y", "c"]
    judged = {"a": 2, "b": 2, "c": 2, "d": 2}
    points = query_pr_points(ranked(pids), judged)
    assert points == [(0.25, 1.0), (0.25, 0.5), (0.5, 2 / 3), (0.5, 0.5), (0.75, 0.6)]
    # enumerate: max precision among points with recall >= level
    expected = [1.0, 1.0, 1.0, 2 / 3, 2 / 3, 2 / 3, 0.6, 0.6, 0.0, 0.0, 0.0]
    assert interpolated_precision(points) == pytest.approx(expected)


def test_pr_excludes_queries_without_relevant():
    qrels = {"a": {"r": 2}, "b": {"r": 1}}
    curve = pr_curve([ranked(["x", "r"], "a"), ranked(["r"], "b")], qrels)
    assert curve[0] == (0.0, 0.5)


def test_eval_config_depth():
    judged = {"r": 2}
    assert reciprocal_rank(ranked(["x", "y", "r"]), judged, depth=2) == 0
    ev = evaluate_run([ranked(["x", "r"])], {"q": judged}, EvalConfig(depth=1))
    assert ev.mrr == 0 and np.isclose(ev.ndcg3, 1 / math.log2(3))
