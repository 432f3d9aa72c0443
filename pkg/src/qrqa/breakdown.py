"""Error attribution: bucket each question by answer correctness under original,
model-rewritten and human-rewritten inputs, then split errors between QA and QR."""

from __future__ import annotations

import csv
import io
import operator
import re
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

VARIANTS = ("original", "qr", "human")
ROW_MARKS = [(o, q, h) for h in (0, 1) for q in (0, 1) for o in (0, 1)]  # rows 1..8

_OPS = {">=": operator.ge, "<=": operator.le, ">": operator.gt, "<": operator.lt, "=": operator.eq}
_SPEC_RE = re.compile(r"^\s*([A-Za-z0-9@_]+)\s*(>=|<=|>|<|=)\s*([0-9.eE+-]+)\s*$")


@dataclass(frozen=True)
class Threshold:
    metric: str
    op: str
    value: float

    @classmethod
    def parse(cls, spec: str) -> "Threshold":
        """Parse e.g. ``"F1>=0.5"``, ``"P@1=1"``, ``"NDCG@3>0"`` (metric names case-insensitive)."""
        m = _SPEC_RE.match(spec.replace("≥", ">=").replace("≤", "<="))
        if not m:
            raise ValueError(f"cannot parse threshold {spec!r}")
        return cls(m.group(1).lower(), m.group(2), float(m.group(3)))

    def __call__(self, value: float) -> bool:
        return _OPS[self.op](value, self.value)

    def __str__(self) -> str:
        v = int(self.value) if self.value == int(self.value) else self.value
        return f"{self.metric.upper()} {self.op} {v}"


@dataclass
class TripleOutcome:
    key: str
    values: dict[str, dict[str, float]]  # variant -> metric -> value
    was_copied: bool = False

    def __post_init__(self):
        missing = [v for v in VARIANTS if v not in self.values]
        if missing:
            raise ValueError(f"{self.key}: missing metric values for {missing}")


def classify(outcome: TripleOutcome, threshold: Threshold) -> int:
    """Row 1..8 in the order xxx, vxx, xvx, vvx, xxv, vxv, xvv, vvv over (original, qr, human)."""
    o, q, h = (int(threshold(outcome.values[v][threshold.metric])) for v in VARIANTS)
    return 1 + o + 2 * q + 4 * h


@dataclass
class BreakdownTable:
    thresholds: list[Threshold]
    counts: dict[str, list[int]] = field(default_factory=dict)  # str(threshold) -> 8 counts
    copies: dict[str, list[int]] = field(default_factory=dict)
    total: int = 0
    total_copied: int = 0

    def column(self, threshold: Threshold | str) -> list[int]:
        if isinstance(threshold, str) and threshold not in self.counts:
            threshold = Threshold.parse(threshold)
        return self.counts[str(threshold)]

    def render(self) -> str:
        names = [str(t) for t in self.thresholds]
        header = ["Original", "QR", "Human"] + names
        rows = [header]
        for r, marks in enumerate(ROW_MARKS):
            cells = ["v" if m else "x" for m in marks]
            for name in names:
                c, k = self.counts[name][r], self.copies[name][r]
                cells.append(f"{c} ({k})" if k else str(c))
            rows.append(cells)
        rows.append(["", "", "Total"] + [f"{self.total} ({self.total_copied})"] * len(names))
        widths = [max(len(row[i]) for row in rows) for i in range(len(header))]
        lines = ["  ".join(cell.rjust(w) for cell, w in zip(row, widths)) for row in rows]
        lines.insert(1, "-" * len(lines[0]))
        lines.insert(10, "-" * len(lines[0]))
        lines.insert(6, "-" * len(lines[0]))
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["row", "original", "qr", "human", "threshold", "count", "copied"])
        for t in self.thresholds:
            name = str(t)
            for r, marks in enumerate(ROW_MARKS):
                w.writerow([r + 1, *marks, name, self.counts[name][r], self.copies[name][r]])
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {
            "total": self.total,
            "total_copied": self.total_copied,
            "columns": {str(t): {"counts": self.counts[str(t)], "copied": self.copies[str(t)],
                                 **attribute_counts(self.counts[str(t)])} for t in self.thresholds},
        }


def breakdown_table(outcomes: Sequence[TripleOutcome], thresholds: Sequence[Threshold | str]) -> BreakdownTable:
    if not outcomes:
        raise ValueError("no outcomes to break down")
    ths = [t if isinstance(t, Threshold) else Threshold.parse(t) for t in thresholds]
    table = BreakdownTable(ths, total=len(outcomes), total_copied=sum(o.was_copied for o in outcomes))
    for t in ths:
        counts, copies = [0] * 8, [0] * 8
        for o in outcomes:
            row = classify(o, t) - 1
            counts[row] += 1
            copies[row] += o.was_copied
        table.counts[str(t)] = counts
        table.copies[str(t)] = copies
    return table


def attribute_counts(counts: Sequence[int]) -> dict[str, int]:
    """QA errors = rows 1-4, QR errors = rows 5-6, true positives = rows 7-8."""
    if len(counts) != 8:
        raise ValueError("expected 8 bucket counts")
    return {
        "qa_errors": sum(counts[0:4]),
        "qr_errors": sum(counts[4:6]),
        "true_positives": sum(counts[6:8]),
        "anomalies": sum(counts[1:4]),
        "total": sum(counts),
    }


def attribute_errors(table: BreakdownTable) -> dict[str, dict[str, int]]:
    return {str(t): attribute_counts(table.counts[str(t)]) for t in table.thresholds}


def run_breakdown(
    predictions: Mapping[str, Mapping[str, object]],
    metric_fn: Callable[[str, object], dict[str, float]],
    thresholds: Sequence[Threshold | str],
    copied: Mapping[str, bool] | None = None,
) -> BreakdownTable:
    """Join per-variant predictions by question key, score each and tabulate.

    ``predictions`` maps each of original/qr/human to {key: prediction};
    ``metric_fn(key, prediction)`` returns the metric values for one answer.
    """
    absent = [v for v in VARIANTS if v not in predictions]
    if absent:
        raise KeyError(f"missing predictions for variants {absent}")
    keys = list(predictions["original"])
    all_keys = set().union(*(set(predictions[v]) for v in VARIANTS))
    gaps = {v: sorted(all_keys - set(predictions[v])) for v in VARIANTS}
    if any(gaps.values()):
        detail = "; ".join(f"{v}: {ks[:10]}" for v, ks in gaps.items() if ks)
        raise KeyError(f"prediction keys differ between variants ({detail})")
    copied = copied or {}
    outcomes = [
        TripleOutcome(k, {v: metric_fn(k, predictions[v][k]) for v in VARIANTS}, bool(copied.get(k, False)))
        for k in keys
    ]
    return breakdown_table(outcomes, thresholds)
