import json
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import confusion_oracle
from pathassist.data import VQARecord
from pathassist.exceptions import InvalidInputError, JudgeError
from pathassist.judges import MockJudge
from pathassist.metrics import (EvalReport, closed_accuracy, evaluate_generations, evaluate_zero_shot,
                                extract_choice, judge_alignment_score, open_recall, per_class_table,
                                zero_shot_metrics, zero_shot_table)

BACH = {"A": "Normal tissue", "B": "Benign tumors", "C": "In situ cancer", "D": "Invasive cancer"}


def test_open_recall_fixture(pytestconfig):
    cases = json.loads((pytestconfig.rootpath / "tests/fixtures/open_recall_cases.json").read_text())
    assert len(cases) == 30
    for c in cases:
        assert open_recall(c["pred"], c["gt"]) == float(Fraction(c["recall"])), c


def test_open_recall_rejects_empty_gold():
    with pytest.raises(InvalidInputError):
        open_recall("x", " ,. ")


@pytest.mark.parametrize("text,letter", [
    ("A", "A"), ("b", "B"), ("(C) In situ cancer", "C"), ("D: invasive", "D"), ("The answer is B.", "B"),
    ("I think the answer is: (c)", "C"), ("invasive   CANCER", "D"), ("benign tumors or invasive cancer", None),
    ("E", None), ("", None), ("Absolutely normal tissue", "A"),
])
def test_extract_choice_cascade(text, letter):
    assert extract_choice(text, BACH) == letter


@given(st.sampled_from(list(BACH)), st.sampled_from(["{}", " {} ", "{}.", "({})", "{}: text"]),
       st.sampled_from([str.lower, str.upper, lambda s: s]))
def test_closed_accuracy_invariant_to_case_and_padding(letter, template, case):
    pred = case(template.format(letter))
    assert closed_accuracy(pred, letter, BACH) == 1


def test_closed_accuracy_letterless_gold():
    yn = {"A": "yes", "B": "no"}
    assert closed_accuracy("Yes, there is.", "yes", yn) == 1
    assert closed_accuracy("no", "yes", yn) == 0
    with pytest.raises(InvalidInputError):
        closed_accuracy("x", "maybe", yn)
    with pytest.raises(InvalidInputError):
        closed_accuracy("x", " ", yn)


def test_zero_shot_metrics_matches_brute_force():
    rng = np.random.default_rng(0)
    for trial in range(1000):
        k = int(rng.integers(2, 6))
        classes = [chr(65 + i) for i in range(k)]
        n = int(rng.integers(1, 30))
        gold = [classes[int(rng.integers(k))] for _ in range(n)]
        preds = [None if rng.uniform() < 0.15 else classes[int(rng.integers(k))] for _ in range(n)]
        items = list(zip(preds, gold))
        assert zero_shot_metrics(items, classes) == confusion_oracle(items, classes), trial


def test_zero_shot_metrics_validation():
    with pytest.raises(InvalidInputError):
        zero_shot_metrics([], "AB")
    with pytest.raises(InvalidInputError):
        zero_shot_metrics([("A", "Z")], "AB")


def test_per_class_table_counts():
    rows = per_class_table([("A", "A"), ("B", "A"), (None, "B")], "AB")
    assert rows[0] == {"class": "A", "support": 2, "predicted": 1, "tp": 1, "recall": 0.5, "precision": 1.0}
    assert rows[1]["precision"] == 0.0


@pytest.mark.parametrize("reply,score", [("7", 7), ("Score: 12/10", 10), ("0", 1), ("about 8 out of 10", 8)])
def test_judge_score_parsing(reply, score):
    assert judge_alignment_score("resp", "ref", MockJudge(lambda p, d: reply)) == score


def test_judge_score_unparseable():
    with pytest.raises(JudgeError):
        judge_alignment_score("resp", "ref", MockJudge(lambda p, d: "excellent"))


def _rec(i, kind, answer, choices=None):
    return VQARecord(id=str(i), image_ref="x", question="q?", answer=answer, kind=kind, choices=choices)


def test_eval_report_mean_and_pooled():
    recs = [_rec(0, "closed", "A", BACH), _rec(1, "closed", "B", BACH), _rec(2, "closed", "C", BACH),
            _rec(3, "open", "red round nuclei")]
    gens = {"0": "A", "1": "A", "2": "C", "3": "round red cells"}
    rep = evaluate_generations(recs, gens)
    assert rep.closed_acc == pytest.approx(2 / 3) and rep.open_recall == pytest.approx(2 / 3)
    assert rep.overall_mean == pytest.approx(2 / 3) and rep.overall_pooled == pytest.approx(3 / 4 * (2 / 3) + 1 / 4 * (2 / 3))
    assert rep.counts == {"closed": 3, "open": 1, "total": 4}
    assert rep.rows[1]["letter_verdict"] == 0 and "containment_verdict" in rep.rows[1]
    assert "| model |" in rep.table()
    with pytest.raises(InvalidInputError):
        evaluate_generations(recs, {})


def test_eval_report_single_column():
    rep = EvalReport.from_rows([{"kind": "open", "score": 0.5}])
    assert rep.closed_acc is None and rep.overall_mean == 0.5


def test_zero_shot_report_and_table():
    recs = [_rec(i, "closed", l, {"A": "Normal tissue", "B": "Tumor tissue"}) for i, l in enumerate("AABB")]
    rep = evaluate_zero_shot("ColonPath", recs, {"0": "A", "1": "B", "2": "B", "3": "tumor tissue"})
    assert (rep.acc, rep.recall, rep.precision) == (0.75, 0.75, (1 + 2 / 3) / 2)
    table = zero_shot_table([rep, rep])
    assert "| ColonPath | 75.00 |" in table and "Overall" in table
