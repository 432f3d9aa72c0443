"""Extractive reader: start/end distributions over [CLS] + passage tokens, span search, No-Answer."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .data_io import Dialogue
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
from .rewriter import baseline_kdt
from .text import Vocabulary, encode, tokenize_with_offsets

log = logging.getLogger(__name__)

DEFAULT_MAX_SPAN_LEN = 30
QA_INPUT_MODES = ("original", "kdt", "rewrite", "human")


@dataclass
class ReaderInput:
    ids: list[int]
    passage_region: tuple[int, int]  # inclusive; first > last when no passage token fits
    char_alignment: dict[int, tuple[int, int]]
    passage: str
    truncated: bool = False

    def allowed_mask(self) -> torch.Tensor:
        mask = torch.zeros(len(self.ids), dtype=torch.bool)
        mask[0] = True
        first, last = self.passage_region
        if first <= last:
            mask[first: last + 1] = True
        return mask

    def token_span(self, start_char: int, end_char: int) -> tuple[int, int] | None:
        """Token indices covering [start_char, end_char), or None if cut off or empty."""
        hits = [i for i, (s, e) in self.char_alignment.items() if e > start_char and s < end_char]
        if not hits:
            return None
        return min(hits), max(hits)


@dataclass
class SpanPrediction:
    start_token: int
    end_token: int
    score: float
    is_no_answer: bool
    answer_text: str = ""


@dataclass
class ReaderExample:
    question: str
    passage: str
    span: tuple[int, int] | None  # character offsets; None means not answerable
    key: str = ""


def build_reader_input(question: str, passage: str, vocab: Vocabulary, max_len: int) -> ReaderInput:
    q = encode(question, vocab)[: max_len // 2]
    toks = tokenize_with_offsets(passage)
    room = max_len - len(q) - 2
    kept = toks[:room]
    first = len(q) + 2
    ids = [vocab.cls_id] + q + [vocab.sep_id] + [vocab.id(t) for t, _, _ in kept]
    align = {first + i: (s, e) for i, (_, s, e) in enumerate(kept)}
    return ReaderInput(ids, (first, first + len(kept) - 1), align, passage, truncated=len(toks) > room)


class ReaderModel(nn.Module):
    def __init__(self, vocab_size: int, cfg: TransformerConfig, seed: int = 0):
        super().__init__()
        if cfg.causal:
            raise ValueError("reader needs a bidirectional config")
        self.cfg = cfg
        self.encoder = Transformer(cfg, vocab_size)
        self.start_weight = nn.Parameter(torch.zeros(cfg.model_dim, dtype=DTYPE))
        self.start_bias = nn.Parameter(torch.zeros((), dtype=DTYPE))
        self.end_weight = nn.Parameter(torch.zeros(cfg.model_dim, dtype=DTYPE))
        self.end_bias = nn.Parameter(torch.zeros((), dtype=DTYPE))
        init_weights(self, seed)

    def log_distributions(self, ids: torch.Tensor, allowed: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Masked log-softmax over positions for start and end: (B, n) each."""
        T, _, _ = self.encoder(ids)
        start = (T @ self.start_weight + self.start_bias).masked_fill(~allowed, float("-inf"))
        end = (T @ self.end_weight + self.end_bias).masked_fill(~allowed, float("-inf"))
        return torch.log_softmax(start, dim=-1), torch.log_softmax(end, dim=-1)


def span_distributions(inp: ReaderInput, model: ReaderModel) -> tuple[torch.Tensor, torch.Tensor]:
    ids = torch.tensor([inp.ids])
    log_s, log_e = model.log_distributions(ids, inp.allowed_mask()[None])
    return log_s[0].exp(), log_e[0].exp()


def reader_loss(S: torch.Tensor, E: torch.Tensor, y_start: int, y_end: int) -> torch.Tensor:
    """Cross-entropy of the start and end distributions against one-hot gold positions."""
    return -(torch.log(S[y_start]) + torch.log(E[y_end]))


def predict_span(S, E, max_span_len: int = DEFAULT_MAX_SPAN_LEN,
                 passage_region: tuple[int, int] | None = None) -> SpanPrediction:
    """Best S_i + E_j with i <= j < i + max_span_len inside the passage, against No-Answer at 0.

    Ties prefer the earlier start, then the shorter span; a tie with the
    No-Answer score predicts No-Answer.
    """
    S = np.asarray(S, dtype=np.float64)
    E = np.asarray(E, dtype=np.float64)
    first, last = passage_region if passage_region is not None else (1, len(S) - 1)
    na = SpanPrediction(0, 0, float(S[0] + E[0]), True)
    if first > last:
        return na
    s, e = S[first: last + 1], E[first: last + 1]
    m = len(s)
    scores = s[:, None] + e[None, :]
    i, j = np.indices((m, m))
    valid = (j >= i) & (j - i < max_span_len)
    scores = np.where(valid, scores, -np.inf)
    flat = int(np.argmax(scores))  # row-major: first hit has the smallest start, then end
    bi, bj = divmod(flat, m)
    best = float(scores[bi, bj])
    if na.score >= best:
        return na
    return SpanPrediction(first + bi, first + bj, best, False)


def qa_question(dialogue: Dialogue, turn_index: int, mode: str, k: int = 0,
                rewrite: str | None = None) -> str:
    """Question side of the reader input for a given QA-input mode."""
    turn = dialogue.turns[turn_index]
    if mode == "original":
        return turn.original_question
    if mode == "kdt":
        return baseline_kdt(dialogue, turn_index, k)
    if mode == "human":
        if turn.human_rewrite is None:
            raise ValueError(f"topic {dialogue.topic_id} turn {turn.turn_id}: no human rewrite")
        return turn.human_rewrite
    if mode == "rewrite":
        if rewrite is None:
            raise ValueError("rewrite mode needs a generated rewrite")
        return rewrite
    raise ValueError(f"unknown QA input mode {mode!r}; expected one of {QA_INPUT_MODES}")


@dataclass
class TrainReport:
    losses: list[float] = field(default_factory=list)
    skipped: int = 0


class Reader:
    CHECKPOINT_TAG = "reader"

    def __init__(self, vocab: Vocabulary, cfg: TransformerConfig | None = None,
                 max_span_len: int = DEFAULT_MAX_SPAN_LEN, seed: int = 0):
        self.vocab = vocab
        self.cfg = cfg or TransformerConfig(causal=False)
        self.max_span_len = max_span_len
        self.seed = seed
        self.model = ReaderModel(len(vocab), self.cfg, seed)
        self.store = ParameterStore(self.model, seed)

    def encode_example(self, ex: ReaderExample) -> tuple[ReaderInput, int, int] | None:
        inp = build_reader_input(ex.question, ex.passage, self.vocab, self.cfg.max_seq_len)
        if ex.span is None:
            return inp, 0, 0
        span = inp.token_span(*ex.span)
        if span is None:
            return None
        return inp, span[0], span[1]

    def batch_loss(self, encoded: Sequence[tuple[ReaderInput, int, int]]) -> torch.Tensor:
        ids = pad_batch([inp.ids for inp, _, _ in encoded], self.vocab.pad_id)
        allowed = torch.zeros(ids.shape, dtype=torch.bool)
        for b, (inp, _, _) in enumerate(encoded):
            allowed[b, : len(inp.ids)] = inp.allowed_mask()
        log_s, log_e = self.model.log_distributions(ids, allowed)
        rows = torch.arange(len(encoded))
        ys = torch.tensor([s for _, s, _ in encoded])
        ye = torch.tensor([e for _, _, e in encoded])
        return -(log_s[rows, ys] + log_e[rows, ye]).mean()

    def fit(self, examples: Sequence[ReaderExample], steps: int, batch_size: int = 16,
            lr: float = 1e-3) -> TrainReport:
        if not examples:
            raise ValueError("empty reader training set")
        report = TrainReport()
        encoded = []
        for ex in examples:
            enc = self.encode_example(ex)
            if enc is None:
                report.skipped += 1
            else:
                encoded.append(enc)
        if report.skipped:
            log.warning("skipped %d reader examples whose gold span was truncated away", report.skipped)
        if not encoded:
            return report
        rng = np.random.default_rng(self.seed)
        self.model.train()
        while len(report.losses) < steps:
            for batch in iter_batches(encoded, batch_size, rng):
                loss = self.batch_loss(batch)
                self.store.backward(loss)
                self.store.optimize_step(lr)
                report.losses.append(loss.item())
                if len(report.losses) >= steps:
                    break
        self.model.eval()
        return report

    @torch.no_grad()
    def predict(self, question: str, passage: str) -> SpanPrediction:
        inp = build_reader_input(question, passage, self.vocab, self.cfg.max_seq_len)
        S, E = span_distributions(inp, self.model)
        pred = predict_span(S.numpy(), E.numpy(), self.max_span_len, inp.passage_region)
        if not pred.is_no_answer:
            start = inp.char_alignment[pred.start_token][0]
            end = inp.char_alignment[pred.end_token][1]
            pred.answer_text = passage[start:end]
        return pred

    def save(self, path) -> None:
        save_checkpoint(path, self.model, tag=self.CHECKPOINT_TAG, config=self.cfg.to_dict(),
                        vocab_hash=self.vocab.digest(), step=self.store.step,
                        extra={"vocab": self.vocab.itos, "seed": self.seed, "max_span_len": self.max_span_len})

    @classmethod
    def load(cls, path) -> "Reader":
        header, tensors = read_checkpoint(path)
        if header["tag"] != cls.CHECKPOINT_TAG:
            raise ValueError(f"{path}: expected a {cls.CHECKPOINT_TAG} checkpoint, got {header['tag']!r}")
        extra = header["extra"]
        vocab = Vocabulary(extra["vocab"])
        if vocab.digest() != header["vocab_hash"]:
            raise ValueError(f"{path}: vocabulary hash mismatch")
        reader = cls(vocab, TransformerConfig.from_dict(header["config"]), extra["max_span_len"], extra["seed"])
        load_into(reader.model, tensors, path)
        reader.store.step = header["step"]
        reader.model.eval()
        return reader
