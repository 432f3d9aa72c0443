"""Transformer decoder question rewriter with a gated mixture-of-softmaxes head, plus
the non-neural rewriting baselines (Original, Original+k-DT, Original+k-DT*)."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
import torch
from torch import nn

from .data_io import Dialogue, Turn
from .neural import (
    DTYPE,
    ParameterStore,
    Transformer,
    TransformerConfig,
    init_weights,
    iter_batches,
    layer_norm,
    load_into,
    pad_batch,
    read_checkpoint,
    save_checkpoint,
)
from .text import SEP, Analyzer, Vocabulary, decode, encode

log = logging.getLogger(__name__)

DEFAULT_WINDOW = 5
CHECKPOINT_TAG = "rewriter"


@dataclass
class RewriteContext:
    previous_turns: list[str]
    current_question: str
    window: int = DEFAULT_WINDOW
    include_answers: bool = False

    def __post_init__(self):
        if self.window < 0:
            raise ValueError("window must be >= 0")

    def history(self) -> list[str]:
        return self.previous_turns[-self.window:] if self.window else []


@dataclass
class RewriteResult:
    rewritten_question: str
    was_copied: bool
    token_log_probs: list[float] = field(default_factory=list)
    truncated: bool = False


def same_question(a: str, b: str) -> bool:
    """Case- and punctuation-insensitive equality used for the copy flag."""
    from .evaluation import normalize_rewrite

    return normalize_rewrite(a) == normalize_rewrite(b)


def encode_context(ctx: RewriteContext, vocab: Vocabulary, max_len: int) -> list[int]:
    """[BOS] t1 [SEP] t2 [SEP] ... [SEP] question, cutting the oldest history tokens first."""
    question = encode(ctx.current_question, vocab)
    if len(question) + 1 > max_len:
        raise ValueError(f"current question alone ({len(question)} tokens) exceeds context limit {max_len - 1}")
    hist: list[int] = []
    for text in ctx.history():
        hist += encode(text, vocab) + [vocab.sep_id]
    budget = max_len - 1 - len(question)
    if len(hist) > budget:
        hist = hist[len(hist) - budget:]
        while hist and hist[0] == vocab.sep_id:
            hist = hist[1:]
    return [vocab.bos_id] + hist + question


def build_context(dialogue: Dialogue, turn_index: int, rewrites_so_far: Sequence[str] | None = None,
                  window: int = DEFAULT_WINDOW, include_answers: bool = False) -> RewriteContext:
    """History comes from ``rewrites_so_far`` when given (recursive mode), else original questions."""
    if not 0 <= turn_index < len(dialogue.turns):
        raise IndexError(f"turn_index {turn_index} out of range for topic {dialogue.topic_id}")
    prior = dialogue.turns[:turn_index]
    if rewrites_so_far is not None and len(rewrites_so_far) < turn_index:
        raise ValueError(f"need {turn_index} prior rewrites, got {len(rewrites_so_far)}")
    items = []
    for i, t in enumerate(prior):
        text = rewrites_so_far[i] if rewrites_so_far is not None else t.original_question
        if include_answers and t.history_answer:
            text = f"{text} {SEP} {t.history_answer}"
        items.append(text)
    return RewriteContext(items, dialogue.turns[turn_index].original_question, window, include_answers)


def assemble_context(dialogue: Dialogue, turn_index: int, vocab: Vocabulary, max_len: int,
                     rewrites_so_far: Sequence[str] | None = None, window: int = DEFAULT_WINDOW,
                     include_answers: bool = False) -> list[int]:
    ctx = build_context(dialogue, turn_index, rewrites_so_far, window, include_answers)
    return encode_context(ctx, vocab, max_len)


# --- model --------------------------------------------------------------------------


class RewriterModel(nn.Module):
    """Causal decoder with ``num_mixtures`` output projections mixed by per-position gates."""

    def __init__(self, vocab_size: int, cfg: TransformerConfig, num_mixtures: int = 2, seed: int = 0):
        super().__init__()
        if not cfg.causal:
            raise ValueError("rewriter needs a causal decoder config")
        if num_mixtures < 1:
            raise ValueError("num_mixtures must be >= 1")
        d = cfg.model_dim
        self.cfg = cfg
        self.num_mixtures = num_mixtures
        self.decoder = Transformer(cfg, vocab_size)
        self.head_weight = nn.Parameter(torch.zeros(num_mixtures, d, vocab_size, dtype=DTYPE))
        self.head_bias = nn.Parameter(torch.zeros(vocab_size, dtype=DTYPE))
        self.gate_g = nn.Parameter(torch.zeros(num_mixtures, d, dtype=DTYPE))
        self.gate_x = nn.Parameter(torch.zeros(num_mixtures, d, dtype=DTYPE))
        self.gate_bias = nn.Parameter(torch.zeros(num_mixtures, dtype=DTYPE))
        init_weights(self, seed)

    def gate_logits(self, G: torch.Tensor, X: torch.Tensor) -> torch.Tensor:
        return layer_norm(G) @ self.gate_g.T + X @ self.gate_x.T + self.gate_bias

    def log_mixture(self, H: torch.Tensor, G: torch.Tensor, X: torch.Tensor) -> torch.Tensor:
        """log D' over the vocabulary for every position: (..., d) -> (..., |V|)."""
        logits = torch.einsum("...d,mdv->...mv", H, self.head_weight) + self.head_bias
        log_components = torch.log_softmax(logits, dim=-1)
        log_alpha = torch.log_softmax(self.gate_logits(G, X), dim=-1)
        return torch.logsumexp(log_alpha.unsqueeze(-1) + log_components, dim=-2)

    def forward(self, ids: torch.Tensor) -> torch.Tensor:
        H, G, X = self.decoder(ids)
        return self.log_mixture(H, G, X)


def mixture_distribution(h: torch.Tensor, x: torch.Tensor, g: torch.Tensor, model: RewriterModel) -> torch.Tensor:
    """D' = sum_i alpha_i softmax(W^H_i h + b^H) for single d-vectors."""
    return model.log_mixture(h, g, x).exp()


def teacher_forcing_batch(examples: Sequence[tuple[list[int], list[int]]], vocab: Vocabulary):
    """Inputs are context + [BOS] + target[:-1]; loss positions cover only the target."""
    seqs, positions, targets = [], [], []
    for b, (ctx, tgt) in enumerate(examples):
        if not tgt:
            raise ValueError("empty target rewrite")
        if tgt[-1] != vocab.eos_id:
            raise ValueError("target rewrite must end with [EOS]")
        seqs.append(list(ctx) + [vocab.bos_id] + list(tgt[:-1]))
        for j, tok in enumerate(tgt):
            positions.append((b, len(ctx) + j))
            targets.append(tok)
    ids = pad_batch(seqs, vocab.pad_id)
    rows = torch.tensor([p[0] for p in positions])
    cols = torch.tensor([p[1] for p in positions])
    return ids, rows, cols, torch.tensor(targets)


def rewriter_loss(model: RewriterModel, examples, vocab: Vocabulary) -> torch.Tensor:
    """Mean -log D'(gold token) over all target positions in the batch."""
    ids, rows, cols, targets = teacher_forcing_batch(examples, vocab)
    H, G, X = model.decoder(ids)
    logp = model.log_mixture(H[rows, cols], G[rows, cols], X[rows, cols])
    return -logp.gather(-1, targets[:, None]).mean()


def train_step(batch, model: RewriterModel, store: ParameterStore, vocab: Vocabulary, lr: float) -> float:
    loss = rewriter_loss(model, batch, vocab)
    store.backward(loss)
    store.optimize_step(lr)
    return loss.item()


def greedy_argmax(logp: torch.Tensor) -> int:
    """Argmax with ties going to the lowest token id."""
    best = logp.max()
    return int(torch.nonzero(logp == best)[0, 0])


@torch.no_grad()
def greedy_decode(model: RewriterModel, context_ids: Sequence[int], vocab: Vocabulary,
                  max_len: int) -> tuple[list[int], list[float], bool]:
    """Append the argmax token until [EOS] or ``max_len`` tokens; returns (ids, log-probs, truncated)."""
    seq = list(context_ids) + [vocab.bos_id]
    out, logps = [], []
    limit = model.cfg.max_seq_len
    for _ in range(max_len):
        if len(seq) > limit:
            return out, logps, True
        logp = model(torch.tensor([seq]))[0, -1]
        tok = greedy_argmax(logp)
        logps.append(float(logp[tok]))
        if tok == vocab.eos_id:
            return out, logps, False
        out.append(tok)
        seq.append(tok)
    return out, logps, True


class QuestionRewriter:
    """A trained (or trainable) rewriter bundled with its vocabulary and context settings."""

    def __init__(self, vocab: Vocabulary, cfg: TransformerConfig | None = None, num_mixtures: int = 2,
                 window: int = DEFAULT_WINDOW, include_answers: bool = False, max_rewrite_len: int = 24,
                 seed: int = 0):
        self.vocab = vocab
        self.cfg = cfg or TransformerConfig()
        self.window = window
        self.include_answers = include_answers
        self.max_rewrite_len = max_rewrite_len
        self.seed = seed
        self.model = RewriterModel(len(vocab), self.cfg, num_mixtures, seed)
        self.store = ParameterStore(self.model, seed)

    @property
    def context_limit(self) -> int:
        # leave room for [BOS] plus the rewrite and its [EOS]
        return self.cfg.max_seq_len - self.max_rewrite_len - 1

    def context_ids(self, ctx: RewriteContext) -> list[int]:
        return encode_context(ctx, self.vocab, self.context_limit)

    def target_ids(self, rewrite: str) -> list[int]:
        ids = encode(rewrite, self.vocab)[: self.max_rewrite_len] + [self.vocab.eos_id]
        return ids

    def training_examples(self, dialogues: Iterable[Dialogue]) -> list[tuple[list[int], list[int]]]:
        """One example per turn with a human rewrite; history is the earlier human rewrites."""
        examples = []
        for d in dialogues:
            rewrites = [t.human_rewrite if t.human_rewrite is not None else t.original_question for t in d.turns]
            for i, t in enumerate(d.turns):
                if t.human_rewrite is None:
                    continue
                ctx = build_context(d, i, rewrites[:i], self.window, self.include_answers)
                examples.append((self.context_ids(ctx), self.target_ids(t.human_rewrite)))
        return examples

    def fit(self, examples, steps: int, batch_size: int = 16, lr: float = 1e-3,
            log_every: int = 0) -> list[float]:
        if not examples:
            raise ValueError("no rewriter training examples")
        rng = np.random.default_rng(self.seed)
        self.model.train()
        losses: list[float] = []
        while len(losses) < steps:
            for batch in iter_batches(examples, batch_size, rng):
                losses.append(train_step(batch, self.model, self.store, self.vocab, lr))
                if log_every and len(losses) % log_every == 0:
                    log.info("rewriter step %d loss %.4f", len(losses), losses[-1])
                if len(losses) >= steps:
                    break
        self.model.eval()
        return losses

    def rewrite(self, ctx: RewriteContext, max_len: int | None = None) -> RewriteResult:
        ids, logps, truncated = greedy_decode(self.model, self.context_ids(ctx), self.vocab,
                                              max_len or self.max_rewrite_len)
        text = decode(ids, self.vocab)
        return RewriteResult(text, same_question(text, ctx.current_question), logps, truncated)

    def rewrite_dialogue(self, dialogue: Dialogue, mode: str = "recursive") -> list[RewriteResult]:
        if mode not in ("recursive", "gold-history"):
            raise ValueError(f"unknown rewrite mode {mode!r}")
        if mode == "gold-history" and any(t.human_rewrite is None for t in dialogue.turns[:-1]):
            raise ValueError(f"topic {dialogue.topic_id}: gold-history mode needs human rewrites")
        results: list[RewriteResult] = []
        for i in range(len(dialogue.turns)):
            if mode == "recursive":
                history = [r.rewritten_question for r in results]
            else:
                history = [t.human_rewrite for t in dialogue.turns[:i]]
            ctx = build_context(dialogue, i, history, self.window, self.include_answers)
            results.append(self.rewrite(ctx))
        return results

    def save(self, path) -> None:
        extra = {
            "num_mixtures": self.model.num_mixtures,
            "window": self.window,
            "include_answers": self.include_answers,
            "max_rewrite_len": self.max_rewrite_len,
            "seed": self.seed,
            "vocab": self.vocab.itos,
        }
        save_checkpoint(path, self.model, tag=CHECKPOINT_TAG, config=self.cfg.to_dict(),
                        vocab_hash=self.vocab.digest(), step=self.store.step, extra=extra)

    @classmethod
    def load(cls, path) -> "QuestionRewriter":
        header, tensors = read_checkpoint(path)
        if header["tag"] != CHECKPOINT_TAG:
            raise ValueError(f"{path}: expected a {CHECKPOINT_TAG} checkpoint, got {header['tag']!r}")
        extra = header["extra"]
        vocab = Vocabulary(extra["vocab"])
        if vocab.digest() != header["vocab_hash"]:
            raise ValueError(f"{path}: vocabulary hash mismatch")
        qr = cls(vocab, TransformerConfig.from_dict(header["config"]), extra["num_mixtures"], extra["window"],
                 extra["include_answers"], extra["max_rewrite_len"], extra["seed"])
        load_into(qr.model, tensors, path)
        qr.store.step = header["step"]
        qr.model.eval()
        return qr


# --- baselines ------------------------------------------------------------------------


def baseline_original(turn: Turn) -> str:
    return turn.original_question


def baseline_kdt(dialogue: Dialogue, turn_index: int, k: int) -> str:
    """Previous k original questions and the current one, joined with [SEP]."""
    if k < 0:
        raise ValueError("k must be >= 0")
    start = max(0, turn_index - k)
    parts = [t.original_question for t in dialogue.turns[start: turn_index + 1]]
    return f" {SEP} ".join(parts)


def baseline_kdt_star(dialogue: Dialogue, turn_index: int, k: int, idf: Callable[[str], float],
                      idf_threshold: float = 0.0001, analyzer: Analyzer | None = None) -> str:
    """Current question followed by the keywords of the previous k turns with IDF above the threshold."""
    if k < 0:
        raise ValueError("k must be >= 0")
    analyzer = analyzer or Analyzer()
    current = dialogue.turns[turn_index].original_question
    seen = set(analyzer(current))
    keywords = []
    for t in dialogue.turns[max(0, turn_index - k): turn_index]:
        for term in analyzer(t.original_question):
            if term not in seen and idf(term) > idf_threshold:
                seen.add(term)
                keywords.append(term)
    return " ".join([current] + keywords)


def copy_flags(rewrites: Sequence[str], originals: Sequence[str]) -> list[bool]:
    return [same_question(r, o) for r, o in zip(rewrites, originals)]
