"""Tokenization for the neural models and term analysis for the BM25 index."""

from __future__ import annotations

import hashlib
import json
import re
from collections import Counter
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Iterable

PAD, UNK, CLS, SEP, BOS, EOS = "[PAD]", "[UNK]", "[CLS]", "[SEP]", "[BOS]", "[EOS]"
SPECIAL_TOKENS = (PAD, UNK, CLS, SEP, BOS, EOS)

_SPECIAL_RE = r"\[(?:PAD|UNK|CLS|SEP|BOS|EOS)\]"
_WORD_RE = r"\w+(?:'\w+)*"
_TOKEN_RE = re.compile(rf"{_SPECIAL_RE}|{_WORD_RE}|[^\w\s]")
_TERM_RE = re.compile(_WORD_RE)


def tokenize_with_offsets(text: str) -> list[tuple[str, int, int]]:
    """Split ``text`` into (token, start_char, end_char) triples.

    Words are lowercased; special markers such as ``[SEP]`` are kept verbatim
    and every other non-space, non-word character becomes its own token.
    """
    out = []
    for m in _TOKEN_RE.finditer(text):
        tok = m.group(0)
        if tok not in SPECIAL_TOKENS:
            tok = tok.lower()
        out.append((tok, m.start(), m.end()))
    return out


def tokenize(text: str) -> list[str]:
    return [t for t, _, _ in tokenize_with_offsets(text)]


def normalize(text: str) -> str:
    """Canonical form that ``decode(encode(text))`` reproduces for in-vocabulary text."""
    return " ".join(tokenize(text))


class Vocabulary:
    """Bijective token <-> id map with the special markers at ids 0..5."""

    def __init__(self, tokens: Iterable[str]):
        self.itos: list[str] = list(tokens)
        if tuple(self.itos[: len(SPECIAL_TOKENS)]) != SPECIAL_TOKENS:
            raise ValueError(f"vocabulary must start with {SPECIAL_TOKENS}")
        self.stoi: dict[str, int] = {}
        for i, tok in enumerate(self.itos):
            if tok in self.stoi:
                raise ValueError(f"duplicate vocabulary token {tok!r}")
            self.stoi[tok] = i

    pad_id = 0
    unk_id = 1
    cls_id = 2
    sep_id = 3
    bos_id = 4
    eos_id = 5

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Vocabulary) and self.itos == other.itos

    def id(self, token: str) -> int:
        return self.stoi.get(token, self.unk_id)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.itos).encode("utf-8")).hexdigest()

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.itos, ensure_ascii=False), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        return cls(json.loads(Path(path).read_text(encoding="utf-8")))


def build_vocabulary(corpus: Iterable[str], max_size: int) -> Vocabulary:
    """Keep the ``max_size - 6`` most frequent tokens, ties broken lexicographically."""
    if max_size <= len(SPECIAL_TOKENS):
        raise ValueError(f"max_size must exceed the {len(SPECIAL_TOKENS)} special tokens, got {max_size}")
    counts: Counter[str] = Counter()
    for text in corpus:
        counts.update(t for t in tokenize(text) if t not in SPECIAL_TOKENS)
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    keep = [tok for tok, _ in ranked[: max_size - len(SPECIAL_TOKENS)]]
    return Vocabulary(SPECIAL_TOKENS + tuple(keep))


def encode(text: str, vocab: Vocabulary) -> list[int]:
    return [vocab.id(t) for t in tokenize(text)]


def decode(ids: Iterable[int], vocab: Vocabulary) -> str:
    words = []
    for i in ids:
        if not 0 <= i < len(vocab):
            raise ValueError(f"token id {i} out of range for vocabulary of size {len(vocab)}")
        if i in (vocab.pad_id, vocab.bos_id, vocab.eos_id):
            continue
        words.append(vocab.itos[i])
    return " ".join(words)


# --- retrieval-side analysis -------------------------------------------------


@lru_cache(maxsize=None)
def default_stopwords() -> frozenset[str]:
    text = resources.files("qrqa").joinpath("data/stopwords.txt").read_text(encoding="utf-8")
    return frozenset(w.strip() for w in text.splitlines() if w.strip())


def load_stopwords(path: str | Path) -> frozenset[str]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return frozenset(w.strip().lower() for w in lines if w.strip())


def s_stem(term: str) -> str:
    """Harman's S-stemmer: strips common English plural endings only."""
    if len(term) > 3 and term.endswith("ies") and not term.endswith(("eies", "aies")):
        return term[:-3] + "y"
    if len(term) > 3 and term.endswith("es") and not term.endswith(("aes", "ees", "oes")):
        return term[:-1]
    if len(term) > 2 and term.endswith("s") and not term.endswith(("us", "ss")):
        return term[:-1]
    return term


@dataclass(frozen=True)
class Analyzer:
    stopwords: frozenset[str] = field(default_factory=default_stopwords)
    stem: bool = False

    def __call__(self, text: str) -> list[str]:
        terms = [t for t in _TERM_RE.findall(text.lower()) if t not in self.stopwords]
        if self.stem:
            terms = [s_stem(t) for t in terms]
        return terms

    def config(self) -> dict:
        return {"stopwords": sorted(self.stopwords), "stem": self.stem}

    @classmethod
    def from_config(cls, cfg: dict) -> "Analyzer":
        return cls(stopwords=frozenset(cfg["stopwords"]), stem=bool(cfg["stem"]))


def analyze_for_retrieval(text: str, analyzer: Analyzer | None = None) -> list[str]:
    return (analyzer or Analyzer())(text)

