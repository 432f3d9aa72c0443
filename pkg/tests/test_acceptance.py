"""Acceptance suite: one test per criterion, each tagged so the run ends with a
PASS/FAIL line per criterion (see conftest.pytest_terminal_summary)."""

import filecmp
import json
import math
import os
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from conftest import tiny_config, toy_vocab
from qrqa.breakdown import attribute_counts, breakdown_table
from qrqa.cli import main
from qrqa.data_io import Passage
from qrqa.evaluation import (
    answer_em,
    answer_f1,
    average_precision,
    evaluate_run,
    ndcg_at_k,
    precision_at_1,
    reciprocal_rank,
    rouge1_recall,
)
from qrqa.neural import ParameterStore, gradient_check, init_weights
from qrqa.reader import Reader, ReaderExample, ReaderModel, build_reader_input, predict_span, span_distributions
from qrqa.retrieval import CrossEncoder, RetrievalConfig, bm25_score, build_index, retrieve
from qrqa.rewriter import RewriterModel, greedy_decode, mixture_distribution, rewriter_loss, train_step
from qrqa.text import Analyzer
from test_breakdown import RETRIEVAL_P1, outcome
from test_evaluation import brute_ap, ranked
from test_reader import brute_force, draw, gold, span_set
from test_retrieval import TOY, marker_set, marker_vocab, oracle_scores
from test_rewriter import overfit_set

pytestmark = pytest.mark.slow


@pytest.mark.criterion(1, "gradient fidelity: rewriter and reader vs central differences, rel err < 1e-4, < 60 s")
def test_criterion_1_gradient_fidelity():
    t0 = time.perf_counter()
    vocab = toy_vocab()
    rewriter = RewriterModel(len(vocab), tiny_config(causal=True), 2, seed=0)
    examples = overfit_set()[:3]
    err_qr = gradient_check(lambda: rewriter_loss(rewriter, examples, vocab),
                            dict(rewriter.named_parameters()), samples_per_param=10)

    reader = Reader(vocab, tiny_config(causal=False), seed=2)
    enc = [reader.encode_example(ReaderExample("w1 w2", "w3 w4 w5 w6", (3, 8))),
           reader.encode_example(ReaderExample("w1", "w7 w8", None))]
    err_qa = gradient_check(lambda: reader.batch_loss(enc), dict(reader.model.named_parameters()),
                            samples_per_param=10)
    elapsed = time.perf_counter() - t0
    print(f"rewriter rel err {err_qr:.2e}, reader rel err {err_qa:.2e}, {elapsed:.1f} s")
    assert err_qr < 1e-4
    assert err_qa < 1e-4
    assert elapsed < 60


@pytest.mark.criterion(2, "distribution validity: 1000 random draws of D' and S/E sum to 1 +- 1e-9, non-negative")
def test_criterion_2_distribution_validity():
    rng = np.random.default_rng(0)
    vocab = toy_vocab()
    rewriter = RewriterModel(len(vocab), tiny_config(d=8), 3, seed=0)
    reader = ReaderModel(len(vocab), tiny_config(causal=False, d=8), seed=0)
    for i in range(1000):
        std = float(rng.choice([0.02, 0.5, 3.0]))
        init_weights(rewriter, i, std=std)
        h, x, g = (torch.tensor(rng.normal(0, std * 10, size=8)) for _ in range(3))
        p = mixture_distribution(h, x, g, rewriter)
        assert (p >= 0).all(), i
        assert abs(p.sum().item() - 1) < 1e-9, i

        init_weights(reader, i, std=std)
        words = " ".join(f"w{j}" for j in rng.integers(0, 30, size=rng.integers(1, 20)))
        q = " ".join(f"w{j}" for j in rng.integers(0, 30, size=rng.integers(1, 5)))
        S, E = span_distributions(build_reader_input(q, words, vocab, 32), reader)
        for P in (S, E):
            assert (P >= 0).all(), i
            assert abs(P.sum().item() - 1) < 1e-9, i


@pytest.mark.criterion(3, "overfit oracles: rewriter exact, reader EM 1.0, cross-encoder loss < 0.05, each < 5 min")
def test_criterion_3_overfit_oracles():
    vocab = toy_vocab()
    t0 = time.perf_counter()
    ex = overfit_set()
    model = RewriterModel(len(vocab), tiny_config(d=32), 2, seed=0)
    store = ParameterStore(model, 0)
    for _ in range(200):
        train_step(ex, model, store, vocab, 1e-2)
    model.eval()
    exact = sum(greedy_decode(model, ctx, vocab, 10)[0] == tgt[:-1] for ctx, tgt in ex)
    t_qr = time.perf_counter() - t0

    t0 = time.perf_counter()
    spans = span_set(np.random.default_rng(0))
    reader = Reader(vocab, tiny_config(causal=False, d=32), seed=0)
    reader.fit(spans, steps=300, batch_size=10, lr=3e-3)
    preds = [reader.predict(e.question, e.passage) for e in spans]
    em = np.mean([answer_em(None if p.is_no_answer else p.answer_text, gold(e)) for p, e in zip(preds, spans)])
    t_qa = time.perf_counter() - t0

    t0 = time.perf_counter()
    pairs = marker_set()
    ce = CrossEncoder(marker_vocab(), tiny_config(causal=False, d=32), seed=0)
    ce.fit(pairs, steps=500, batch_size=16, lr=3e-3)
    ce_loss = ce.loss(pairs).item()
    t_ce = time.perf_counter() - t0
    print(f"rewriter exact {exact}/10 ({t_qr:.1f} s), reader EM {em:.2f} ({t_qa:.1f} s), "
          f"cross-encoder loss {ce_loss:.4f} ({t_ce:.1f} s)")
    assert exact == 10 and t_qr < 300
    assert em == 1.0 and t_qa < 300
    assert ce_loss < 0.05 and t_ce < 300


@pytest.mark.criterion(4, "BM25: closed form on the 3-passage fixture within 1e-4, brute-force order on 100 collections")
def test_criterion_4_bm25():
    index = build_index(TOY)
    idf = math.log(1 + (3 - 1 + 0.5) / (1 + 0.5))
    assert bm25_score(["alpha"], "p1", index) == pytest.approx(idf * 2 * 1.82 / (2 + 0.82), abs=1e-4)
    assert bm25_score(["alpha"], "p1", index) == pytest.approx(1.2661, abs=1e-4)

    rng = np.random.default_rng(1)
    words = [f"t{i}" for i in range(12)]
    for trial in range(100):
        cfg = RetrievalConfig(k1=0.82, b=0.68, top_k=int(rng.integers(1, 30)))
        passages = [Passage(f"d{i:02d}", " ".join(rng.choice(words, size=rng.integers(1, 9))))
                    for i in range(int(rng.integers(1, 25)))]
        question = " ".join(rng.choice(words, size=rng.integers(1, 5)))
        got = retrieve(question, build_index(passages, Analyzer(frozenset())), cfg)
        scores = oracle_scores(question, passages, cfg, frozenset())
        want = sorted((p for p, s in scores.items() if s > 0), key=lambda p: (-round(scores[p], 9), p))
        assert got.passage_ids() == want[: cfg.top_k], trial


@pytest.mark.criterion(5, "metric oracles within 1e-6 plus range, rank-only and below-depth properties")
def test_criterion_5_metrics():
    judged = {"r1": 2, "r2": 3, "n": 1}
    assert average_precision(ranked(["r1", "x", "r2"]), judged) == pytest.approx(5 / 6, abs=1e-6)
    assert reciprocal_rank(ranked(["x", "y", "z", "r1"]), judged) == pytest.approx(0.25, abs=1e-6)
    assert precision_at_1(ranked(["n", "r1"]), judged) == 0
    assert ndcg_at_k(ranked(["a", "b", "c"]), {"a": 3, "c": 1}) == pytest.approx(
        3.5 / (3 + 1 / math.log2(3)), abs=1e-6)
    assert rouge1_recall("what is the gdp of xi'an", "what is xi'an's gdp") == pytest.approx(0.75, abs=1e-6)
    assert answer_f1("in shaanxi china", "shaanxi china") == pytest.approx(0.8, abs=1e-6)
    assert answer_em("Shaanxi, China", "shaanxi china") == 1

    qrels = {"q1": {"a": 2, "b": 4, "c": 2, "z": 0}, "q2": {"k": 3, "m": 1}}
    ev = evaluate_run([ranked(["n", "a", "b", "z"], "q1"), ranked(["k", "m"], "q2")], qrels)
    assert ev.map == pytest.approx(((1 / 2 + 2 / 3) / 3 + 1) / 2, abs=1e-6)
    assert ev.mrr == pytest.approx(0.75, abs=1e-6) and ev.p1 == pytest.approx(0.5, abs=1e-6)

    rng = np.random.default_rng(2)
    pool = [f"p{i}" for i in range(15)]
    for _ in range(500):
        pids = list(rng.permutation(pool)[: rng.integers(1, 13)])
        judged = {p: int(rng.integers(0, 5)) for p in rng.choice(pool, size=rng.integers(0, 10), replace=False)}
        a, scaled = ranked(pids), ranked(pids, scores=[3.0 * (len(pids) - i) + 50 for i in range(len(pids))])
        depth = 3
        tail = pids[depth:]
        rng.shuffle(tail)
        b = ranked(pids[:depth] + tail)
        for f in (average_precision, reciprocal_rank, precision_at_1, ndcg_at_k):
            v = f(a, judged)
            assert v is None or 0 <= v <= 1 + 1e-12
            assert f(scaled, judged) == v
        for f in (average_precision, reciprocal_rank, precision_at_1):
            assert f(a, judged, depth=depth) == f(b, judged, depth=depth)
        assert ndcg_at_k(a, judged, k=3) == ndcg_at_k(b, judged, k=3)
        relevant = {p for p, g in judged.items() if g >= 2}
        assert average_precision(a, judged) == pytest.approx(brute_ap(pids, relevant))


@pytest.mark.criterion(6, "span inference equals brute force on 1000 S/E draws including NA")
def test_criterion_6_span_inference():
    rng = np.random.default_rng(3)
    na = 0
    for _ in range(1000):
        n = int(rng.integers(2, 14))
        S, E = draw(rng, n)
        L = int(rng.integers(1, 6))
        first = int(rng.integers(1, n))
        region = (first, int(rng.integers(first, n)))
        want, got = brute_force(S, E, L, region), predict_span(S, E, L, region)
        if want is None:
            na += 1
            assert got.is_no_answer
        else:
            assert (got.start_token, got.end_token) == want and not got.is_no_answer
    assert 0 < na < 1000


@pytest.mark.criterion(7, "break-down arithmetic: published P@1 column gives 173 / 51 / 19; bucket sums hold")
def test_criterion_7_breakdown():
    a = attribute_counts(RETRIEVAL_P1)
    assert (a["total"], a["qa_errors"], a["qr_errors"]) == (173, 51, 19)
    rng = np.random.default_rng(4)
    for _ in range(1000):
        n = int(rng.integers(1, 40))
        outs = [outcome(*rng.choice([0, 0.3, 0.5, 1.0], size=3), copied=bool(rng.random() < 0.3), key=str(i))
                for i in range(n)]
        table = breakdown_table(outs, ["F1>0", "F1>=0.5", "F1=1"])
        for t in table.thresholds:
            c = attribute_counts(table.column(t))
            assert c["total"] == n
            assert c["qa_errors"] + c["qr_errors"] + c["true_positives"] == n
            assert sum(table.copies[str(t)]) == table.total_copied


def cli(*args):
    assert main(list(args)) == 0, args


@pytest.mark.criterion(8, "end to end: BM25 MRR human = 1.0 > trained rewriter > original, < 10 min")
def test_criterion_8_end_to_end(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    t0 = time.perf_counter()
    cli("synth", "--dir", "data", "--entities", "40", "--test-dialogues", "20")
    assert len(Path("data/collection.tsv").read_text().splitlines()) == 200
    cli("index")
    cli("train-qr")
    cli("pipeline", "--qr", "transformer", "--skip-rerank", "--skip-read")
    elapsed = time.perf_counter() - t0
    summary = json.loads(Path("work/out/pipeline.transformer.json").read_text())
    mrr = {v: summary["variants"][v]["bm25"]["mrr"] for v in ("human", "transformer", "original")}
    print(f"MRR {mrr}, {elapsed:.0f} s")
    assert mrr["human"] == 1.0
    assert mrr["human"] > mrr["transformer"] > mrr["original"]
    assert elapsed < 600


TINY = [
    "--set", "rewriter.steps=40", "--set", "rewriter.model.model_dim=16", "--set", "rewriter.model.ff_dim=32",
    "--set", "rewriter.model.num_heads=2",
    "--set", "reranker.steps=20", "--set", "reranker.model.model_dim=16", "--set", "reranker.model.ff_dim=32",
    "--set", "reranker.model.num_heads=2",
    "--set", "reader.steps=20", "--set", "reader.model.model_dim=16", "--set", "reader.model.ff_dim=32",
    "--set", "reader.model.num_heads=2",
]


def full_run(root: Path):
    cwd = os.getcwd()
    root.mkdir()
    os.chdir(root)
    try:
        cli("synth", "--dir", "data", "--entities", "10", "--test-dialogues", "4", "--train-dialogues", "30")
        cli("index")
        for cmd in ("train-qr", "train-reranker", "train-reader"):
            cli(cmd, *TINY)
        cli("pipeline", "--qr", "transformer", *TINY)
    finally:
        os.chdir(cwd)


def all_files(root: Path) -> list[str]:
    return sorted(str(p.relative_to(root)) for p in root.rglob("*") if p.is_file())


@pytest.mark.criterion(9, "determinism: two seeded pipeline runs give byte-identical runs, predictions, reports")
def test_criterion_9_determinism(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    full_run(a)
    full_run(b)
    files = all_files(a)
    assert files == all_files(b)
    out = [f for f in files if f.startswith("work/out/")]
    for kind in ("run.bm25.", "run.rerank.", "predictions.", "eval.", "breakdown.", "pipeline."):
        assert any(Path(f).name.startswith(kind) for f in out), kind
    _, mismatch, errors = filecmp.cmpfiles(a, b, files, shallow=False)
    assert not mismatch and not errors, mismatch + errors
