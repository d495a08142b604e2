"""VQA and zero-shot metrics, choice extraction, judge scoring and reports."""
from __future__ import annotations

import json
import math
import re
import string
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import InvalidInputError, JudgeError
from .judges import JudgeClient, with_retries

_PUNCT = re.compile(f"[{re.escape(string.punctuation)}]")

SCORE_PROMPT = (
    "Rate the semantic similarity between the response and the reference caption of a "
    "pathology image on a scale of 1 to 10, where 10 means identical meaning. Reply with the number only."
)


def normalize(text: str) -> Counter:
    """Lowercase, replace punctuation with spaces, split on whitespace; returns a token multiset."""
    return Counter(_PUNCT.sub(" ", text.lower()).split())


def open_recall(pred: str, gt: str) -> float:
    gt_tokens = normalize(gt)
    if not gt_tokens:
        raise InvalidInputError(f"ground truth {gt!r} has no tokens after normalization")
    hit = sum((gt_tokens & normalize(pred)).values())
    return hit / sum(gt_tokens.values())


_LEADING = re.compile(r"^\s*\(?([A-Za-z])(?:\s*[:.)]|\s|$)")
_ANSWER_IS = re.compile(r"answer\s+is\s*:?\s*\(?([A-Za-z])\b", re.IGNORECASE)


def _squash(text: str) -> str:
    return " ".join(text.split()).lower()


def extract_choice(generated: str, choices: dict) -> str | None:
    """First matching rule wins: leading letter, "answer is X", then a unique verbatim choice text.

    Matching ignores case and runs of whitespace.
    """
    m = _LEADING.match(generated)
    if m and m.group(1).upper() in choices:
        return m.group(1).upper()
    m = _ANSWER_IS.search(generated)
    if m and m.group(1).upper() in choices:
        return m.group(1).upper()
    low = _squash(generated)
    hits = [k for k, v in choices.items() if _squash(v) and _squash(v) in low]
    return hits[0] if len(hits) == 1 else None


def contains_answer(pred: str, gold_text: str) -> bool:
    gold = normalize(gold_text)
    if not gold:
        raise InvalidInputError(f"gold answer {gold_text!r} has no tokens")
    return not (gold - normalize(pred))


def closed_accuracy(pred: str, gt_answer: str, choices: dict | None = None) -> int:
    """1 if the prediction picks the gold option.

    Letter golds are matched through :func:`extract_choice`; letterless golds
    (e.g. yes/no) by token containment of the gold answer in the prediction.
    """
    if not gt_answer or not gt_answer.strip():
        raise InvalidInputError("gold answer is empty")
    if choices and gt_answer in choices:
        return int(extract_choice(pred, choices) == gt_answer)
    if choices and gt_answer.strip().lower() not in {v.strip().lower() for v in choices.values()}:
        raise InvalidInputError(f"gold {gt_answer!r} is neither a choice letter nor a choice text")
    return int(contains_answer(pred, gt_answer))


def zero_shot_metrics(items, classes) -> tuple[float, float, float]:
    """Micro accuracy and macro recall/precision over ``classes``.

    ``items`` are ``(predicted letter or None, gold letter)`` pairs. A ``None``
    prediction is wrong for every class; a class never predicted has
    precision 0, a class never present has recall 0.
    """
    items = list(items)
    classes = list(classes)
    if not items:
        raise InvalidInputError("no items to score")
    index = {c: i for i, c in enumerate(classes)}
    k = len(classes)
    conf = np.zeros((k, k + 1), dtype=np.int64)  # last column: no/invalid prediction
    for pred, gold in items:
        if gold not in index:
            raise InvalidInputError(f"gold label {gold!r} not in classes {classes}")
        conf[index[gold], index.get(pred, k)] += 1
    tp = np.diag(conf[:, :k])
    support = conf.sum(axis=1)
    predicted = conf[:, :k].sum(axis=0)
    recall = [int(t) / int(s) if s else 0.0 for t, s in zip(tp, support)]
    precision = [int(t) / int(p) if p else 0.0 for t, p in zip(tp, predicted)]
    acc = int(tp.sum()) / len(items)
    return acc, math.fsum(recall) / k, math.fsum(precision) / k


def per_class_table(items, classes) -> list[dict]:
    items = list(items)
    rows = []
    for c in classes:
        tp = sum(1 for p, g in items if p == c and g == c)
        support = sum(1 for _, g in items if g == c)
        predicted = sum(1 for p, _ in items if p == c)
        rows.append({"class": c, "support": support, "predicted": predicted, "tp": tp,
                     "recall": tp / support if support else 0.0,
                     "precision": tp / predicted if predicted else 0.0})
    return rows


def _parse_score(raw: str) -> int:
    m = re.search(r"\d+", raw or "")
    if not m:
        raise JudgeError(f"no integer in judge reply {raw!r}")
    return min(10, max(1, int(m.group())))


def judge_alignment_score(response: str, reference_caption: str, judge: JudgeClient,
                          prompt: str = SCORE_PROMPT) -> int:
    payload = {"id": None, "text": f"Response: {response}\nReference caption: {reference_caption}"}
    return with_retries(judge, prompt, payload, _parse_score)


@dataclass
class EvalReport:
    rows: list = field(default_factory=list)
    closed_acc: float | None = None
    open_recall: float | None = None
    overall_mean: float | None = None
    overall_pooled: float | None = None
    counts: dict = field(default_factory=dict)

    @classmethod
    def from_rows(cls, rows: list[dict]) -> "EvalReport":
        closed = [r["score"] for r in rows if r["kind"] == "closed"]
        opened = [r["score"] for r in rows if r["kind"] == "open"]
        mean = lambda xs: math.fsum(xs) / len(xs) if xs else None  # noqa: E731
        c, o = mean(closed), mean(opened)
        parts = [x for x in (c, o) if x is not None]
        return cls(rows=rows, closed_acc=c, open_recall=o,
                   overall_mean=math.fsum(parts) / len(parts) if parts else None,
                   overall_pooled=mean(closed + opened),
                   counts={"closed": len(closed), "open": len(opened), "total": len(rows)})

    def to_dict(self) -> dict:
        return asdict(self)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")

    def table(self, name: str = "model") -> str:
        fmt = lambda x: "-" if x is None else f"{100 * x:.2f}"  # noqa: E731
        return (
            "| Model | Closed Acc | Open Rec | Overall (mean of columns) | Overall (pooled items) |\n"
            "|---|---|---|---|---|\n"
            f"| {name} | {fmt(self.closed_acc)} | {fmt(self.open_recall)} | "
            f"{fmt(self.overall_mean)} | {fmt(self.overall_pooled)} |\n"
        )


def score_item(record, generation: str) -> dict:
    """Per-item verdicts; closed items log both the letter and the containment reading."""
    row = {"id": record.id, "kind": record.kind, "gold": record.answer, "generation": generation}
    if record.kind == "open":
        row["score"] = open_recall(generation, record.answer)
        return row
    letter = record.gold_letter
    gold_text = record.choices[letter] if letter else record.answer
    row["letter_verdict"] = None if letter is None else int(extract_choice(generation, record.choices) == letter)
    row["containment_verdict"] = int(contains_answer(generation, gold_text))
    row["score"] = closed_accuracy(generation, record.answer, record.choices)
    return row


def evaluate_generations(records, generations: dict[str, str]) -> EvalReport:
    missing = [r.id for r in records if r.id not in generations]
    if missing:
        raise InvalidInputError(f"no generation for {len(missing)} records, e.g. {missing[:3]}")
    return EvalReport.from_rows([score_item(r, generations[r.id]) for r in records])


@dataclass
class ZeroShotReport:
    dataset: str
    acc: float
    recall: float
    precision: float
    per_class: list
    rows: list

    def to_dict(self) -> dict:
        return asdict(self)


def evaluate_zero_shot(name: str, records, generations: dict[str, str]) -> ZeroShotReport:
    classes = list(records[0].choices)
    rows, items = [], []
    for r in records:
        pred = extract_choice(generations[r.id], r.choices)
        rows.append({"id": r.id, "gold": r.answer, "pred": pred, "generation": generations[r.id]})
        items.append((pred, r.answer))
    acc, rec, pre = zero_shot_metrics(items, classes)
    return ZeroShotReport(name, acc, rec, pre, per_class_table(items, classes), rows)


def zero_shot_table(reports: list[ZeroShotReport]) -> str:
    head = "| Dataset | Acc | Rec | Pre |\n|---|---|---|---|\n"
    body = "".join(f"| {r.dataset} | {100 * r.acc:.2f} | {100 * r.recall:.2f} | {100 * r.precision:.2f} |\n"
                   for r in reports)
    if len(reports) > 1:
        n = len(reports)
        body += (f"| Overall | {100 * sum(r.acc for r in reports) / n:.2f} | "
                 f"{100 * sum(r.recall for r in reports) / n:.2f} | {100 * sum(r.precision for r in reports) / n:.2f} |\n")
    return head + body
