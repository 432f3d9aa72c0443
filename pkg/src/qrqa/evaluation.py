"""Rewrite, retrieval and extraction metrics."""

from __future__ import annotations

import math
import re
import string
import unicodedata
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .data_io import Qrels, RankedList
from .text import tokenize

RECALL_LEVELS = tuple(i / 10 for i in range(11))


# --- rewrite quality ---------------------------------------------------------------


def rouge_tokens(text: str) -> list[str]:
    """Lowercased whitespace tokens with punctuation characters removed in place."""
    return "".join(ch for ch in text.lower() if not unicodedata.category(ch).startswith("P")).split()


def normalize_rewrite(text: str) -> str:
    return " ".join(rouge_tokens(text))


def rouge1_recall(candidate: str, reference: str) -> float:
    ref = Counter(rouge_tokens(reference))
    cand = Counter(rouge_tokens(candidate))
    total = sum(ref.values())
    if total == 0:
        return 1.0 if not cand else 0.0
    return sum((ref & cand).values()) / total


def rewrite_exact_match(candidate: str, reference: str) -> int:
    return int(normalize_rewrite(candidate) == normalize_rewrite(reference))


def count_embedder(text: str) -> dict[str, float]:
    """L2-normalized token-count vector (sparse)."""
    counts = Counter(tokenize(text))
    norm = math.sqrt(sum(v * v for v in counts.values()))
    return {t: v / norm for t, v in counts.items()} if norm else {}


def similarity(candidate: str, reference: str,
               embedder: Callable[[str], dict[str, float] | Sequence[float]] = count_embedder) -> float:
    """Cosine similarity of embedder outputs; 0 when either vector is zero."""
    a, b = embedder(candidate), embedder(reference)
    if isinstance(a, dict):
        dot = sum(v * b.get(k, 0.0) for k, v in a.items())
        na = math.sqrt(sum(v * v for v in a.values()))
        nb = math.sqrt(sum(v * v for v in b.values()))
    else:
        a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
        dot, na, nb = float(a @ b), float(np.linalg.norm(a)), float(np.linalg.norm(b))
    if na == 0 or nb == 0:
        return 0.0
    return dot / (na * nb)


@dataclass
class RewriteEval:
    rouge1_recall: float
    exact_match: int
    similarity: float | None = None


def evaluate_rewrite(candidate: str, reference: str, embedder=count_embedder) -> RewriteEval:
    return RewriteEval(rouge1_recall(candidate, reference), rewrite_exact_match(candidate, reference),
                       similarity(candidate, reference, embedder) if embedder else None)


# --- extractive answers --------------------------------------------------------------

_ARTICLES = re.compile(r"\b(a|an|the)\b")
_PUNCT = set(string.punctuation)


def normalize_answer(text: str) -> str:
    """SQuAD normalization: lowercase, drop punctuation and articles, collapse whitespace."""
    text = "".join(ch for ch in text.lower() if ch not in _PUNCT)
    return " ".join(_ARTICLES.sub(" ", text).split())


def answer_em(prediction: str | None, gold: str | None) -> int:
    """``None`` stands for No-Answer on either side."""
    if prediction is None or gold is None:
        return int(prediction is None and gold is None)
    return int(normalize_answer(prediction) == normalize_answer(gold))


def answer_f1(prediction: str | None, gold: str | None) -> float:
    if prediction is None or gold is None:
        return float(prediction is None and gold is None)
    p, g = normalize_answer(prediction).split(), normalize_answer(gold).split()
    if not p or not g:
        return float(p == g)
    common = sum((Counter(p) & Counter(g)).values())
    if common == 0:
        return 0.0
    precision, recall = common / len(p), common / len(g)
    return 2 * precision * recall / (precision + recall)


@dataclass
class ExtractiveEval:
    em: float
    f1: float
    na_acc: float | None
    count: int
    na_count: int
    per_question: dict[str, dict] = field(default_factory=dict)


def evaluate_extractive(predictions: dict[str, str | None], golds: dict[str, str | None]) -> ExtractiveEval:
    """EM/F1 over all gold questions; NA accuracy over unanswerable ones only."""
    missing = sorted(set(golds) - set(predictions))
    if missing:
        raise KeyError(f"no prediction for {len(missing)} questions, e.g. {missing[:5]}")
    per = {}
    for key, gold in golds.items():
        pred = predictions[key]
        per[key] = {"em": answer_em(pred, gold), "f1": answer_f1(pred, gold)}
    na_keys = [k for k, g in golds.items() if g is None]
    na_acc = sum(predictions[k] is None for k in na_keys) / len(na_keys) if na_keys else None
    n = len(golds)
    return ExtractiveEval(
        em=sum(v["em"] for v in per.values()) / n if n else 0.0,
        f1=sum(v["f1"] for v in per.values()) / n if n else 0.0,
        na_acc=na_acc, count=n, na_count=len(na_keys), per_question=per,
    )


# --- retrieval ---------------------------------------------------------------------


@dataclass(frozen=True)
class EvalConfig:
    cutoff_grade: int = 2
    depth: int = 1000
    ndcg_k: int = 3
    ndcg_binarize: bool = False


def _ranked_ids(ranked: RankedList, depth: int) -> list[str]:
    return [e.passage_id for e in sorted(ranked.entries, key=lambda e: e.rank)[:depth]]


def _relevant(judged: dict[str, int], cutoff_grade: int) -> set[str]:
    return {p for p, g in judged.items() if g >= cutoff_grade}


def average_precision(ranked: RankedList, judged: dict[str, int], cutoff_grade: int = 2,
                      depth: int = 1000) -> float:
    relevant = _relevant(judged, cutoff_grade)
    if not relevant:
        return 0.0
    hits, total = 0, 0.0
    for r, pid in enumerate(_ranked_ids(ranked, depth), start=1):
        if pid in relevant:
            hits += 1
            total += hits / r
    return total / len(relevant)


def reciprocal_rank(ranked: RankedList, judged: dict[str, int], cutoff_grade: int = 2,
                    depth: int = 1000) -> float:
    relevant = _relevant(judged, cutoff_grade)
    for r, pid in enumerate(_ranked_ids(ranked, depth), start=1):
        if pid in relevant:
            return 1.0 / r
    return 0.0


def precision_at_1(ranked: RankedList, judged: dict[str, int], cutoff_grade: int = 2,
                   depth: int = 1000) -> float:
    top = _ranked_ids(ranked, min(depth, 1))
    return float(bool(top) and judged.get(top[0], 0) >= cutoff_grade)


def ndcg_at_k(ranked: RankedList, judged: dict[str, int], k: int = 3, binarize: bool = False,
              cutoff_grade: int = 2) -> float | None:
    """Linear-gain NDCG@k; None when the ideal DCG is zero (query has no positive grade)."""
    if k < 1:
        raise ValueError("k must be >= 1")
    gain = (lambda g: float(g >= cutoff_grade)) if binarize else float
    ideal = sorted((gain(g) for g in judged.values()), reverse=True)[:k]
    idcg = sum(g / math.log2(r + 1) for r, g in enumerate(ideal, start=1))
    if idcg == 0:
        return None
    dcg = sum(gain(judged.get(pid, 0)) / math.log2(r + 1)
              for r, pid in enumerate(_ranked_ids(ranked, k), start=1))
    return dcg / idcg


@dataclass
class RetrievalEval:
    map: float
    mrr: float
    ndcg3: float
    p1: float
    per_query: dict[str, dict[str, float | None]] = field(default_factory=dict)
    missing_in_qrels: list[str] = field(default_factory=list)
    missing_in_run: list[str] = field(default_factory=list)
    ndcg_excluded: list[str] = field(default_factory=list)

    def aggregates(self) -> dict[str, float]:
        return {"map": self.map, "mrr": self.mrr, "ndcg@3": self.ndcg3, "p@1": self.p1}


def _mean(values: Iterable[float]) -> float:
    values = list(values)
    return sum(values) / len(values) if values else 0.0


def query_metrics(ranked: RankedList, judged: dict[str, int], cfg: EvalConfig = EvalConfig()) -> dict:
    return {
        "map": average_precision(ranked, judged, cfg.cutoff_grade, cfg.depth),
        "mrr": reciprocal_rank(ranked, judged, cfg.cutoff_grade, cfg.depth),
        "ndcg@3": ndcg_at_k(ranked, judged, cfg.ndcg_k, cfg.ndcg_binarize, cfg.cutoff_grade),
        "p@1": precision_at_1(ranked, judged, cfg.cutoff_grade, cfg.depth),
    }


def evaluate_run(run: Sequence[RankedList], qrels: Qrels, cfg: EvalConfig = EvalConfig()) -> RetrievalEval:
    """Macro-averaged metrics over queries present in both the run and the qrels."""
    by_q = {rl.query_id: rl for rl in run}
    shared = [q for q in by_q if q in qrels]
    if not shared:
        raise ValueError("run and qrels share no query ids")
    per = {q: query_metrics(by_q[q], qrels[q], cfg) for q in shared}
    ndcg_ok = [q for q in shared if per[q]["ndcg@3"] is not None]
    return RetrievalEval(
        map=_mean(per[q]["map"] for q in shared),
        mrr=_mean(per[q]["mrr"] for q in shared),
        ndcg3=_mean(per[q]["ndcg@3"] for q in ndcg_ok),
        p1=_mean(per[q]["p@1"] for q in shared),
        per_query=per,
        missing_in_qrels=[q for q in by_q if q not in qrels],
        missing_in_run=[q for q in qrels if q not in by_q],
        ndcg_excluded=[q for q in shared if per[q]["ndcg@3"] is None],
    )


def query_pr_points(ranked: RankedList, judged: dict[str, int], cutoff_grade: int = 2,
                    depth: int = 1000) -> list[tuple[float, float]]:
    """(recall, precision) after each rank 1..depth."""
    relevant = _relevant(judged, cutoff_grade)
    points, hits = [], 0
    for r, pid in enumerate(_ranked_ids(ranked, depth), start=1):
        hits += pid in relevant
        points.append((hits / len(relevant), hits / r))
    return points


def interpolated_precision(points: Sequence[tuple[float, float]], levels=RECALL_LEVELS) -> list[float]:
    """Max precision over points with recall >= level (0 when unreached)."""
    return [max((p for r, p in points if r >= level - 1e-12), default=0.0) for level in levels]


def pr_curve(run: Sequence[RankedList], qrels: Qrels, cfg: EvalConfig = EvalConfig()) -> list[tuple[float, float]]:
    """11-point interpolated precision-recall curve, macro-averaged over queries with relevant passages."""
    by_q = {rl.query_id: rl for rl in run}
    shared = [q for q in by_q if q in qrels]
    if not shared:
        raise ValueError("run and qrels share no query ids")
    curves = [interpolated_precision(query_pr_points(by_q[q], qrels[q], cfg.cutoff_grade, cfg.depth))
              for q in shared if _relevant(qrels[q], cfg.cutoff_grade)]
    if not curves:
        return [(level, 0.0) for level in RECALL_LEVELS]
    avg = np.mean(np.asarray(curves), axis=0)
    return [(level, float(p)) for level, p in zip(RECALL_LEVELS, avg)]
