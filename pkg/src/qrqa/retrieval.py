"""BM25 candidate selection over an inverted index and cross-encoder re-ranking."""

from __future__ import annotations

import json
import logging
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Protocol, Sequence

import numpy as np
import torch
from torch import nn

from .data_io import DataError, Passage, Qrels, RankedList, RunEntry, atomic_write_text
from .neural import (
    DTYPE,
    ParameterStore,
    Transformer,
    TransformerConfig,
    init_weights,
    iter_batches,
    load_into,
    pad_batch,
    read_checkpoint,
    save_checkpoint,
)
from .text import Analyzer, Vocabulary, encode

log = logging.getLogger(__name__)

INDEX_FORMAT_VERSION = 1


@dataclass(frozen=True)
class RetrievalConfig:
    k1: float = 0.82
    b: float = 0.68
    top_k: int = 1000

    def __post_init__(self):
        if self.k1 < 0:
            raise ValueError("k1 must be >= 0")
        if not 0 <= self.b <= 1:
            raise ValueError("b must lie in [0, 1]")
        if self.top_k < 1:
            raise ValueError("top_k must be >= 1")


@dataclass
class InvertedIndex:
    postings: dict[str, list[tuple[str, int]]] = field(default_factory=dict)
    doc_length: dict[str, int] = field(default_factory=dict)
    texts: dict[str, str] = field(default_factory=dict)
    analyzer: Analyzer = field(default_factory=Analyzer)

    @property
    def N(self) -> int:
        return len(self.doc_length)

    @property
    def avgdl(self) -> float:
        return sum(self.doc_length.values()) / self.N if self.N else 0.0

    def df(self, term: str) -> int:
        return len(self.postings.get(term, ()))

    def idf(self, term: str) -> float:
        """Lucene-style smoothed IDF, ln(1 + (N - df + 0.5) / (df + 0.5))."""
        df = self.df(term)
        return math.log(1.0 + (self.N - df + 0.5) / (df + 0.5))

    def tf(self, term: str, passage_id: str) -> int:
        for pid, tf in self.postings.get(term, ()):
            if pid == passage_id:
                return tf
        return 0

    def __eq__(self, other):
        if not isinstance(other, InvertedIndex):
            return NotImplemented
        return (self.postings == other.postings and self.doc_length == other.doc_length
                and self.texts == other.texts and self.analyzer == other.analyzer)


def build_index(collection: Iterable[Passage], analyzer: Analyzer | None = None) -> InvertedIndex:
    index = InvertedIndex(analyzer=analyzer or Analyzer())
    postings: dict[str, list[tuple[str, int]]] = defaultdict(list)
    for p in collection:
        if p.passage_id in index.doc_length:
            raise DataError(f"duplicate passage id {p.passage_id!r}")
        terms = index.analyzer(p.text)
        index.doc_length[p.passage_id] = len(terms)
        index.texts[p.passage_id] = p.text
        for term, tf in Counter(terms).items():
            postings[term].append((p.passage_id, tf))
    index.postings = {t: sorted(plist) for t, plist in sorted(postings.items())}
    return index


# On-disk layout (directory):
#   meta.json     {"format_version", "N", "avgdl", "analyzer": {...}}
#   doclen.tsv    passage_id<TAB>length, collection order
#   postings.tsv  term<TAB>df<TAB>pid<TAB>tf<TAB>pid<TAB>tf..., terms sorted
#   texts.tsv     passage_id<TAB>text, collection order


def save_index(index: InvertedIndex, directory: str | Path) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    meta = {"format_version": INDEX_FORMAT_VERSION, "N": index.N, "avgdl": index.avgdl,
            "analyzer": index.analyzer.config()}
    atomic_write_text(d / "doclen.tsv", "".join(f"{p}\t{n}\n" for p, n in index.doc_length.items()))
    atomic_write_text(d / "texts.tsv", "".join(f"{p}\t{t}\n" for p, t in index.texts.items()))
    lines = []
    for term, plist in index.postings.items():
        cells = [term, str(len(plist))]
        for pid, tf in plist:
            cells += [pid, str(tf)]
        lines.append("\t".join(cells) + "\n")
    atomic_write_text(d / "postings.tsv", "".join(lines))
    atomic_write_text(d / "meta.json", json.dumps(meta, indent=1, sort_keys=True) + "\n")


def load_index(directory: str | Path) -> InvertedIndex:
    d = Path(directory)
    if not (d / "meta.json").exists():
        raise FileNotFoundError(f"{d}: no index found (run the 'index' subcommand)")
    meta = json.loads((d / "meta.json").read_text(encoding="utf-8"))
    if meta["format_version"] != INDEX_FORMAT_VERSION:
        raise DataError(f"{d}: unsupported index version {meta['format_version']}")
    index = InvertedIndex(analyzer=Analyzer.from_config(meta["analyzer"]))
    for line in (d / "doclen.tsv").read_text(encoding="utf-8").splitlines():
        pid, n = line.split("\t")
        index.doc_length[pid] = int(n)
    for line in (d / "texts.tsv").read_text(encoding="utf-8").splitlines():
        pid, _, text = line.partition("\t")
        index.texts[pid] = text
    for lineno, line in enumerate((d / "postings.tsv").read_text(encoding="utf-8").splitlines(), 1):
        cells = line.split("\t")
        term, df, rest = cells[0], int(cells[1]), cells[2:]
        plist = [(rest[i], int(rest[i + 1])) for i in range(0, len(rest), 2)]
        if len(plist) != df:
            raise DataError(f"{d / 'postings.tsv'}:{lineno}: df {df} but {len(plist)} postings")
        index.postings[term] = plist
    if index.N != meta["N"]:
        raise DataError(f"{d}: meta N={meta['N']} but {index.N} documents")
    return index


def bm25_term(tf: int, dl: int, idf: float, avgdl: float, cfg: RetrievalConfig) -> float:
    norm = cfg.k1 * (1 - cfg.b + cfg.b * dl / avgdl)
    return idf * tf * (cfg.k1 + 1) / (tf + norm)


def bm25_score(query_terms: Sequence[str], passage_id: str, index: InvertedIndex,
               cfg: RetrievalConfig = RetrievalConfig()) -> float:
    """Sum of per-term BM25 contributions; repeated query terms count repeatedly."""
    if passage_id not in index.doc_length:
        raise KeyError(f"unknown passage id {passage_id!r}")
    dl = index.doc_length[passage_id]
    score = 0.0
    for term in query_terms:
        tf = index.tf(term, passage_id)
        if tf:
            score += bm25_term(tf, dl, index.idf(term), index.avgdl, cfg)
    return score


def retrieve(question: str, index: InvertedIndex, cfg: RetrievalConfig = RetrievalConfig(),
             query_id: str = "q", tag: str = "bm25") -> RankedList:
    """Term-at-a-time scoring over postings; positive scores only, ties by passage id."""
    terms = index.analyzer(question)
    acc: dict[str, float] = {}
    avgdl = index.avgdl
    for term in terms:
        plist = index.postings.get(term)
        if not plist:
            continue
        idf = index.idf(term)
        for pid, tf in plist:
            acc[pid] = acc.get(pid, 0.0) + bm25_term(tf, index.doc_length[pid], idf, avgdl, cfg)
    ranked = sorted(((p, s) for p, s in acc.items() if s > 0), key=lambda ps: (-ps[1], ps[0]))
    return RankedList.from_scored(query_id, ranked[: cfg.top_k], tag)


# --- re-ranking ----------------------------------------------------------------------


class Reranker(Protocol):
    def __call__(self, question: str, passage: str) -> float: ...


def rerank(question: str, ranked: RankedList, scorer: Reranker | Callable[[str, str], float],
           texts: dict[str, str], tag: str | None = None) -> RankedList:
    """Reorder candidates by scorer (descending), ties keep the prior rank order."""
    missing = [e.passage_id for e in ranked.entries if e.passage_id not in texts]
    if missing:
        raise KeyError(f"cannot resolve passage text for {missing[:5]}")
    passages = [texts[e.passage_id] for e in ranked.entries]
    batch = getattr(scorer, "score_batch", None)
    scores = batch(question, passages) if batch else [scorer(question, p) for p in passages]
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], ranked.entries[i].rank))
    entries = [RunEntry(ranked.entries[i].passage_id, r, float(scores[i])) for r, i in enumerate(order, 1)]
    return RankedList(ranked.query_id, entries, tag or f"{ranked.tag}+rerank")


def pair_ids(question: str, passage: str, vocab: Vocabulary, max_len: int) -> list[int]:
    """[CLS] question [SEP] passage, cutting passage tokens (never question tokens) to fit."""
    q = encode(question, vocab)[: max_len - 2]
    p = encode(passage, vocab)[: max_len - 2 - len(q)]
    return [vocab.cls_id] + q + [vocab.sep_id] + p


class CrossEncoderModel(nn.Module):
    def __init__(self, vocab_size: int, cfg: TransformerConfig, seed: int = 0):
        super().__init__()
        if cfg.causal:
            raise ValueError("cross-encoder needs a bidirectional config")
        self.cfg = cfg
        self.encoder = Transformer(cfg, vocab_size)
        self.cls_weight = nn.Parameter(torch.zeros(cfg.model_dim, dtype=DTYPE))
        self.cls_bias = nn.Parameter(torch.zeros((), dtype=DTYPE))
        init_weights(self, seed)

    def forward(self, ids: torch.Tensor) -> torch.Tensor:
        """Relevance logits, one per sequence."""
        T, _, _ = self.encoder(ids)
        return T[:, 0] @ self.cls_weight + self.cls_bias


class CrossEncoder:
    """Trainable relevance scorer; calling it returns sigmoid(logit) in [0, 1]."""

    CHECKPOINT_TAG = "reranker"

    def __init__(self, vocab: Vocabulary, cfg: TransformerConfig | None = None, seed: int = 0):
        self.vocab = vocab
        self.cfg = cfg or TransformerConfig(causal=False)
        self.seed = seed
        self.model = CrossEncoderModel(len(vocab), self.cfg, seed)
        self.store = ParameterStore(self.model, seed)

    def _ids(self, pairs: Sequence[tuple[str, str]]) -> torch.Tensor:
        return pad_batch([pair_ids(q, p, self.vocab, self.cfg.max_seq_len) for q, p in pairs], self.vocab.pad_id)

    @torch.no_grad()
    def score_batch(self, question: str, passages: Sequence[str], batch_size: int = 64) -> list[float]:
        out: list[float] = []
        for i in range(0, len(passages), batch_size):
            chunk = [(question, p) for p in passages[i: i + batch_size]]
            out += torch.sigmoid(self.model(self._ids(chunk))).tolist()
        return out

    def __call__(self, question: str, passage: str) -> float:
        return self.score_batch(question, [passage])[0]

    def loss(self, examples: Sequence[tuple[str, str, int]]) -> torch.Tensor:
        logits = self.model(self._ids([(q, p) for q, p, _ in examples]))
        labels = torch.tensor([float(y) for _, _, y in examples], dtype=DTYPE)
        return nn.functional.binary_cross_entropy_with_logits(logits, labels)

    def fit(self, examples: Sequence[tuple[str, str, int]], steps: int, batch_size: int = 16,
            lr: float = 1e-3, target_loss: float | None = None) -> list[float]:
        """Binary cross-entropy training; stops early once the full-set loss drops below ``target_loss``."""
        labels = {y for _, _, y in examples}
        if labels != {0, 1}:
            raise ValueError(f"re-ranker training needs both labels, got {sorted(labels)}")
        rng = np.random.default_rng(self.seed)
        losses: list[float] = []
        while len(losses) < steps:
            for batch in iter_batches(examples, batch_size, rng):
                loss = self.loss(batch)
                self.store.backward(loss)
                self.store.optimize_step(lr)
                losses.append(loss.item())
                if len(losses) >= steps:
                    break
            if target_loss is not None:
                with torch.no_grad():
                    if self.loss(examples).item() < target_loss:
                        break
        return losses

    def save(self, path) -> None:
        save_checkpoint(path, self.model, tag=self.CHECKPOINT_TAG, config=self.cfg.to_dict(),
                        vocab_hash=self.vocab.digest(), step=self.store.step,
                        extra={"vocab": self.vocab.itos, "seed": self.seed})

    @classmethod
    def load(cls, path) -> "CrossEncoder":
        header, tensors = read_checkpoint(path)
        if header["tag"] != cls.CHECKPOINT_TAG:
            raise ValueError(f"{path}: expected a {cls.CHECKPOINT_TAG} checkpoint, got {header['tag']!r}")
        vocab = Vocabulary(header["extra"]["vocab"])
        if vocab.digest() != header["vocab_hash"]:
            raise ValueError(f"{path}: vocabulary hash mismatch")
        ce = cls(vocab, TransformerConfig.from_dict(header["config"]), header["extra"]["seed"])
        load_into(ce.model, tensors, path)
        ce.store.step = header["step"]
        return ce


def reranker_examples(questions: dict[str, str], qrels: Qrels, index: InvertedIndex,
                      cfg: RetrievalConfig = RetrievalConfig(), negatives_per_query: int = 3,
                      cutoff_grade: int = 2, seed: int = 0) -> list[tuple[str, str, int]]:
    """Positives from qrels; negatives sampled from BM25 top-k candidates not judged relevant."""
    rng = np.random.default_rng(seed)
    out = []
    for qid, question in questions.items():
        judged = qrels.get(qid, {})
        relevant = [p for p, g in judged.items() if g >= cutoff_grade and p in index.texts]
        if not relevant:
            continue
        out += [(question, index.texts[p], 1) for p in relevant]
        pool = [p for p in retrieve(question, index, cfg).passage_ids() if judged.get(p, 0) < cutoff_grade]
        if pool:
            picks = rng.choice(len(pool), size=min(negatives_per_query, len(pool)), replace=False)
            out += [(question, index.texts[pool[i]], 0) for i in sorted(picks)]
    return out
