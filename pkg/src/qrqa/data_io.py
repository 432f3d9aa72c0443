"""Readers and writers for dialogues, passage collections, qrels, runs and JSONL outputs."""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

DIALOGUE_FORMATS = ("canard-json", "cast-json")


class DataError(ValueError):
    """Raised for malformed input files; the message names the file and record."""


@dataclass(frozen=True)
class AnswerSpan:
    passage_id: str
    start: int
    end: int


@dataclass
class Turn:
    turn_id: int
    original_question: str
    human_rewrite: str | None = None
    gold_answer_text: str | None = None
    gold_answer_span: AnswerSpan | None = None
    is_answerable: bool = True
    answer_given_in_dialogue: str | None = None
    # passage a reader should consult; lets unanswerable turns name their passage
    passage_id: str | None = None

    @property
    def history_answer(self) -> str | None:
        return self.answer_given_in_dialogue if self.answer_given_in_dialogue is not None else self.gold_answer_text

    @property
    def context_passage_id(self) -> str | None:
        if self.gold_answer_span is not None:
            return self.gold_answer_span.passage_id
        return self.passage_id


@dataclass
class Dialogue:
    topic_id: str
    turns: list[Turn] = field(default_factory=list)

    def key(self, turn: Turn) -> str:
        return query_id(self.topic_id, turn.turn_id)


def query_id(topic_id: str, turn_id: int) -> str:
    """TREC CAsT query ids are ``<topic>_<turn>``."""
    return f"{topic_id}_{turn_id}"


@dataclass(frozen=True)
class Passage:
    passage_id: str
    text: str


@dataclass(frozen=True)
class RunEntry:
    passage_id: str
    rank: int
    score: float


@dataclass
class RankedList:
    query_id: str
    entries: list[RunEntry] = field(default_factory=list)
    tag: str = "run"

    def passage_ids(self) -> list[str]:
        return [e.passage_id for e in self.entries]

    def validate(self) -> None:
        seen = set()
        for i, e in enumerate(self.entries):
            if e.rank != i + 1:
                raise DataError(f"query {self.query_id}: ranks must be contiguous from 1, got {e.rank} at position {i}")
            if i and e.score > self.entries[i - 1].score:
                raise DataError(f"query {self.query_id}: scores increase at rank {e.rank}")
            if e.passage_id in seen:
                raise DataError(f"query {self.query_id}: duplicate passage {e.passage_id}")
            seen.add(e.passage_id)

    @classmethod
    def from_scored(cls, query_id: str, scored: Iterable[tuple[str, float]], tag: str) -> "RankedList":
        entries = [RunEntry(pid, r, float(s)) for r, (pid, s) in enumerate(scored, start=1)]
        return cls(query_id, entries, tag)


Qrels = dict[str, dict[str, int]]


def atomic_write_text(path: str | Path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# --- dialogues ----------------------------------------------------------------


def _require(obj: dict, key: str, kind: type | tuple, where: str):
    if key not in obj:
        raise DataError(f"{where}: missing field {key!r}")
    value = obj[key]
    if isinstance(value, bool) and kind is int:
        raise DataError(f"{where}: field {key!r} must be an integer")
    if not isinstance(value, kind):
        raise DataError(f"{where}: field {key!r} has wrong type {type(value).__name__}")
    return value


def _optional(obj: dict, key: str, kind: type | tuple, where: str):
    if key not in obj:
        return None
    return _require(obj, key, kind, where)


def _turn_from_json(rec: dict, where: str) -> Turn:
    if not isinstance(rec, dict):
        raise DataError(f"{where}: turn must be an object")
    span = None
    raw_span = _optional(rec, "answer_span", dict, where)
    if raw_span is not None:
        span = AnswerSpan(
            _require(raw_span, "passage_id", str, where + ".answer_span"),
            _require(raw_span, "start", int, where + ".answer_span"),
            _require(raw_span, "end", int, where + ".answer_span"),
        )
        if not 0 <= span.start <= span.end:
            raise DataError(f"{where}: answer_span requires 0 <= start <= end, got {span.start}..{span.end}")
    answerable = _optional(rec, "answerable", bool, where)
    turn = Turn(
        turn_id=_require(rec, "turn_id", int, where),
        original_question=_require(rec, "question", str, where),
        human_rewrite=_optional(rec, "rewrite", str, where),
        gold_answer_text=_optional(rec, "answer_text", str, where),
        gold_answer_span=span,
        is_answerable=True if answerable is None else answerable,
        answer_given_in_dialogue=_optional(rec, "dialogue_answer", str, where),
        passage_id=_optional(rec, "passage_id", str, where),
    )
    if not turn.is_answerable and span is not None:
        raise DataError(f"{where}: unanswerable turn must not carry an answer_span")
    return turn


def _turn_to_json(turn: Turn) -> dict:
    rec: dict = {"turn_id": turn.turn_id, "question": turn.original_question}
    if turn.human_rewrite is not None:
        rec["rewrite"] = turn.human_rewrite
    if turn.gold_answer_text is not None:
        rec["answer_text"] = turn.gold_answer_text
    if turn.gold_answer_span is not None:
        s = turn.gold_answer_span
        rec["answer_span"] = {"passage_id": s.passage_id, "start": s.start, "end": s.end}
    if not turn.is_answerable:
        rec["answerable"] = False
    if turn.answer_given_in_dialogue is not None:
        rec["dialogue_answer"] = turn.answer_given_in_dialogue
    if turn.passage_id is not None:
        rec["passage_id"] = turn.passage_id
    return rec


def load_dialogues(path: str | Path, format: str = "canard-json") -> list[Dialogue]:
    """Load a JSON array of ``{"topic_id", "turns": [...]}`` records.

    Both CANARD-style and CAsT-style files share one schema; CAsT files just
    omit rewrites and answers.
    """
    if format not in DIALOGUE_FORMATS:
        raise ValueError(f"unknown dialogue format {format!r}; expected one of {DIALOGUE_FORMATS}")
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise DataError(f"{path}: invalid JSON ({e})") from e
    if not isinstance(raw, list):
        raise DataError(f"{path}: expected a JSON array of dialogues")
    dialogues = []
    for di, rec in enumerate(raw):
        where = f"{path}: record {di}"
        if not isinstance(rec, dict):
            raise DataError(f"{where}: dialogue must be an object")
        topic = _require(rec, "topic_id", str, where)
        turns_raw = _require(rec, "turns", list, where)
        turns = [_turn_from_json(t, f"{where} turn {ti}") for ti, t in enumerate(turns_raw)]
        for ti, t in enumerate(turns):
            if t.turn_id != ti:
                raise DataError(f"{where} turn {ti}: turn_id must be {ti} (0-based, contiguous), got {t.turn_id}")
        dialogues.append(Dialogue(topic, turns))
    return dialogues


def dumps_dialogues(dialogues: Iterable[Dialogue]) -> str:
    payload = [{"topic_id": d.topic_id, "turns": [_turn_to_json(t) for t in d.turns]} for d in dialogues]
    return json.dumps(payload, ensure_ascii=False, indent=1) + "\n"


def write_dialogues(dialogues: Iterable[Dialogue], path: str | Path) -> None:
    atomic_write_text(path, dumps_dialogues(dialogues))


def check_spans(dialogues: Iterable[Dialogue], passages: dict[str, str]) -> None:
    """Verify every gold span lies inside its passage (offsets are code points)."""
    for d in dialogues:
        for t in d.turns:
            s = t.gold_answer_span
            if s is None:
                continue
            if s.passage_id not in passages:
                raise DataError(f"topic {d.topic_id} turn {t.turn_id}: unknown passage {s.passage_id}")
            if s.end > len(passages[s.passage_id]):
                raise DataError(f"topic {d.topic_id} turn {t.turn_id}: span end {s.end} beyond passage length")


# --- collection -------------------------------------------------------------------


def load_collection(path: str | Path) -> Iterator[Passage]:
    with open(path, encoding="utf-8", newline="") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.rstrip("\r\n")
            pid, sep, text = line.partition("\t")
            if not sep:
                raise DataError(f"{path}:{lineno}: expected 'passage_id<TAB>text'")
            yield Passage(pid, text)


def write_collection(passages: Iterable[Passage], path: str | Path) -> None:
    lines = []
    for p in passages:
        if "\t" in p.passage_id or "\n" in p.text or "\t" in p.text:
            raise ValueError(f"passage {p.passage_id!r} cannot be written as TSV")
        lines.append(f"{p.passage_id}\t{p.text}\n")
    atomic_write_text(path, "".join(lines))


# --- qrels and runs -------------------------------------------------------------


def load_qrels(path: str | Path) -> Qrels:
    qrels: Qrels = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 4:
                raise DataError(f"{path}:{lineno}: expected 'query_id 0 passage_id grade'")
            qid, _, pid, grade_s = parts
            try:
                grade = int(grade_s)
            except ValueError:
                raise DataError(f"{path}:{lineno}: non-numeric grade {grade_s!r}") from None
            if not 0 <= grade <= 4:
                raise DataError(f"{path}:{lineno}: grade {grade} outside 0..4")
            judged = qrels.setdefault(qid, {})
            if judged.get(pid, grade) != grade:
                raise DataError(f"{path}:{lineno}: conflicting grades for ({qid}, {pid})")
            judged[pid] = grade
    return qrels


def write_qrels(qrels: Qrels, path: str | Path) -> None:
    lines = [f"{qid} 0 {pid} {g}\n" for qid, judged in qrels.items() for pid, g in judged.items()]
    atomic_write_text(path, "".join(lines))


def format_score(score: float) -> str:
    """Six decimals with trailing zeros dropped: 12.5 -> '12.5'."""
    s = f"{score:.6f}".rstrip("0").rstrip(".")
    return "0" if s == "-0" else s


def dumps_run(runs: Iterable[RankedList]) -> str:
    lines = []
    for rl in runs:
        for e in rl.entries:
            lines.append(f"{rl.query_id} Q0 {e.passage_id} {e.rank} {format_score(e.score)} {rl.tag}\n")
    return "".join(lines)


def write_run(runs: Iterable[RankedList], path: str | Path) -> None:
    atomic_write_text(path, dumps_run(runs))


def read_run(path: str | Path) -> list[RankedList]:
    runs: dict[str, RankedList] = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 6:
                raise DataError(f"{path}:{lineno}: expected 'query_id Q0 passage_id rank score tag'")
            qid, _, pid, rank_s, score_s, tag = parts
            try:
                rank = int(rank_s)
                score = float(score_s)
            except ValueError:
                raise DataError(f"{path}:{lineno}: non-numeric rank or score") from None
            rl = runs.setdefault(qid, RankedList(qid, [], tag))
            rl.entries.append(RunEntry(pid, rank, score))
    for rl in runs.values():
        rl.validate()
    return list(runs.values())


# --- JSON lines -----------------------------------------------------------------


def write_jsonl(rows: Iterable[dict], path: str | Path) -> None:
    atomic_write_text(path, "".join(json.dumps(r, ensure_ascii=False) + "\n" for r in rows))


def read_jsonl(path: str | Path) -> list[dict]:
    rows = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                rows.append(json.loads(line))
            except json.JSONDecodeError as e:
                raise DataError(f"{path}:{lineno}: invalid JSON ({e})") from e
    return rows


def write_json(obj, path: str | Path) -> None:
    atomic_write_text(path, json.dumps(obj, ensure_ascii=False, indent=2, sort_keys=True) + "\n")
