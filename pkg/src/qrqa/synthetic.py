"""Generated conversational corpus where each human rewrite uniquely keys its gold passage.

Every passage states one attribute of one entity ("the elevation of varoku
is 812 meters ."). Dialogues open with an explicit question about an
entity and continue with anaphoric follow-ups ("what is its rainfall ?"),
occasionally switching to a new, explicitly named entity. Human rewrites
restore the entity name, so BM25 over a rewrite ranks the gold passage
first while the original follow-up only matches the attribute.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data_io import (
    AnswerSpan,
    Dialogue,
    Passage,
    Qrels,
    Turn,
    query_id,
    write_collection,
    write_dialogues,
    write_qrels,
)
from .text import default_stopwords

ATTRIBUTES = (
    ("population", "residents"),
    ("elevation", "meters"),
    ("area", "hectares"),
    ("rainfall", "millimeters"),
    ("temperature", "degrees"),
)
# asked about but never stated in any passage
MISSING_ATTRIBUTES = ("motto", "anthem")
FOLLOW_UPS = (
    "what is its {attr} ?",
    "how about its {attr} ?",
    "and its {attr} ?",
    "what is the {attr} there ?",
)
_ONSETS = "b d f g k l m n p r s t v z".split()
_VOWELS = "a e i o u".split()


@dataclass
class SyntheticCorpus:
    passages: list[Passage]
    train: list[Dialogue]
    test: list[Dialogue]
    train_qrels: Qrels
    test_qrels: Qrels
    entities: list[str]
    heldout_entities: list[str]

    def write(self, directory: str | Path) -> dict[str, Path]:
        d = Path(directory)
        paths = {
            "collection": d / "collection.tsv",
            "train_dialogues": d / "train.json",
            "dialogues": d / "test.json",
            "train_qrels": d / "qrels.train.txt",
            "qrels": d / "qrels.test.txt",
        }
        write_collection(self.passages, paths["collection"])
        write_dialogues(self.train, paths["train_dialogues"])
        write_dialogues(self.test, paths["dialogues"])
        write_qrels(self.train_qrels, paths["train_qrels"])
        write_qrels(self.test_qrels, paths["qrels"])
        return paths


def _entity_names(rng: np.random.Generator, n: int) -> list[str]:
    stop = default_stopwords()
    names: list[str] = []
    while len(names) < n:
        syllables = rng.integers(2, 4)
        name = "".join(rng.choice(_ONSETS) + rng.choice(_VOWELS) for _ in range(syllables))
        if name not in names and name not in stop:
            names.append(name)
    return names


def passage_id(entity_index: int, attr_index: int) -> str:
    return f"P{entity_index:03d}{attr_index}"


def _dialogue(rng, topic_id, entity_pool, entities, values, n_turns, p_switch, p_missing, qrels) -> Dialogue:
    turns: list[Turn] = []
    current = int(rng.choice(entity_pool))
    asked: set[int] = set()
    for t in range(n_turns):
        switch = t > 0 and rng.random() < p_switch
        if switch:
            current = int(rng.choice([e for e in entity_pool if e != current]))
            asked = set()
        name = entities[current]
        explicit = t == 0 or switch
        if not explicit and rng.random() < p_missing:
            attr = str(rng.choice(MISSING_ATTRIBUTES))
            question = str(rng.choice(FOLLOW_UPS)).format(attr=attr)
            turns.append(Turn(t, question, human_rewrite=f"what is the {attr} of {name} ?", is_answerable=False,
                              passage_id=passage_id(current, 0)))
            continue
        choices = [a for a in range(len(ATTRIBUTES)) if a not in asked] or list(range(len(ATTRIBUTES)))
        a = int(rng.choice(choices))
        asked.add(a)
        attr, unit = ATTRIBUTES[a]
        rewrite = f"what is the {attr} of {name} ?"
        question = rewrite if explicit else str(rng.choice(FOLLOW_UPS)).format(attr=attr)
        pid = passage_id(current, a)
        answer = f"{values[current][a]} {unit}"
        text = passage_text(name, attr, values[current][a], unit)
        start = text.index(answer)
        turns.append(Turn(t, question, human_rewrite=rewrite, gold_answer_text=answer,
                          gold_answer_span=AnswerSpan(pid, start, start + len(answer))))
        judged = {passage_id(current, other): 1 for other in range(len(ATTRIBUTES)) if other != a}
        judged[pid] = 3
        qrels[query_id(topic_id, t)] = judged
    return Dialogue(topic_id, turns)


def passage_text(entity: str, attr: str, value: int, unit: str) -> str:
    return f"the {attr} of {entity} is {value} {unit} ."


def generate_corpus(seed: int = 0, n_entities: int = 40, n_test: int = 20, n_train: int = 300,
                    min_turns: int = 3, max_turns: int = 6, heldout_fraction: float = 0.2,
                    p_switch: float = 0.15, p_missing: float = 0.1) -> SyntheticCorpus:
    """Build passages, train/test dialogues and graded qrels.

    Gold passages get grade 3 and the entity's other passages grade 1.
    A ``heldout_fraction`` of entities never appears in training dialogues,
    so a rewriter trained only on those dialogues has never seen them.
    """
    rng = np.random.default_rng(seed)
    entities = _entity_names(rng, n_entities)
    values = rng.integers(100, 10000, size=(n_entities, len(ATTRIBUTES))).tolist()
    passages = [
        Passage(passage_id(e, a), passage_text(entities[e], attr, values[e][a], unit))
        for e in range(n_entities) for a, (attr, unit) in enumerate(ATTRIBUTES)
    ]
    n_held = int(round(heldout_fraction * n_entities))
    held = sorted(rng.choice(n_entities, size=n_held, replace=False).tolist()) if n_held else []
    seen = [e for e in range(n_entities) if e not in held]
    train_qrels: Qrels = {}
    test_qrels: Qrels = {}
    train = [
        _dialogue(rng, f"T{i}", seen, entities, values, int(rng.integers(min_turns, max_turns + 1)),
                  p_switch, p_missing, train_qrels)
        for i in range(n_train)
    ]
    test = [
        _dialogue(rng, f"{i + 1}", list(range(n_entities)), entities, values,
                  int(rng.integers(min_turns, max_turns + 1)), p_switch, p_missing, test_qrels)
        for i in range(n_test)
    ]
    return SyntheticCorpus(passages, train, test, train_qrels, test_qrels, entities,
                           [entities[e] for e in held])
