import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sswp.metrics import MetricsError, evaluate, format_table

LW, PW, PPH, IPH = range(4)


def brute_force(pred, gold):
    """Independent per-class counter, one juncture at a time."""
    out = {}
    for c, name in enumerate(["LW", "PW", "PPH", "IPH"]):
        tp = fp = fn = 0
        for ps, gs in zip(pred, gold):
            for p, g in zip(ps, gs):
                if p == c and g == c:
                    tp += 1
                elif p == c:
                    fp += 1
                elif g == c:
                    fn += 1
        prec = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
        out[name] = (tp, fp, fn, prec, rec, f1)
    return out


def random_sequences(rng, n=100):
    gold, pred = [], []
    for _ in range(n):
        m = int(rng.integers(1, 15))
        gold.append(rng.integers(0, 4, m).tolist())
        pred.append(rng.integers(0, 4, m).tolist())
    return pred, gold


def test_worked_example():
    rep = evaluate([[LW, PW, PW, PPH]], [[LW, PW, LW, PPH]])
    pw = rep.classes["PW"]
    assert (pw.tp, pw.fp, pw.fn) == (1, 1, 0)
    assert pw.precision == 0.5 and pw.recall == 1.0
    assert pw.f1 == pytest.approx(2 / 3, abs=1e-12)


def test_perfect_prediction():
    gold = [[LW, PW, PPH, IPH], [PW, IPH]]
    rep = evaluate(gold, gold)
    for s in rep.classes.values():
        assert s.f1 == 1.0 and s.precision == 1.0 and s.recall == 1.0


def test_absent_class_is_zero_and_flagged():
    rep = evaluate([[LW, IPH]], [[LW, IPH]])
    s = rep.classes["PPH"]
    assert (s.precision, s.recall, s.f1) == (0.0, 0.0, 0.0)
    assert s.undefined
    assert not rep.classes["IPH"].undefined
    assert "(undefined)" in rep.to_text()
    assert json.loads(rep.to_json())["classes"]["PPH"]["undefined"] is True


def test_agrees_with_brute_force_on_100_random_sequences():
    pred, gold = random_sequences(np.random.default_rng(0))
    rep = evaluate(pred, gold)
    ref = brute_force(pred, gold)
    for name, (tp, fp, fn, p, r, f) in ref.items():
        s = rep.classes[name]
        assert (s.tp, s.fp, s.fn) == (tp, fp, fn)
        assert (s.precision, s.recall, s.f1) == (p, r, f)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_report_invariants(seed):
    rng = np.random.default_rng(seed)
    pred, gold = random_sequences(rng, n=int(rng.integers(1, 20)))
    rep = evaluate(pred, gold)
    n = sum(len(g) for g in gold)
    assert rep.total == n
    correct = sum(int(p == g) for ps, gs in zip(pred, gold) for p, g in zip(ps, gs))
    assert sum(s.tp for s in rep.classes.values()) == correct
    perm = rng.permutation(len(pred))
    rep2 = evaluate([pred[i] for i in perm], [gold[i] for i in perm])
    assert np.array_equal(rep.confusion, rep2.confusion)
    assert rep.to_dict() == rep2.to_dict()


def test_confusion_rows_are_gold():
    rep = evaluate([[PW]], [[PPH]])
    assert rep.confusion[PPH, PW] == 1


def test_length_mismatch_names_utterance():
    with pytest.raises(MetricsError, match="utt7"):
        evaluate([[LW, IPH]], [[IPH]], ids=["utt7"])
    with pytest.raises(MetricsError):
        evaluate([[IPH]], [[IPH], [IPH]])


def test_macro_f1_over_three_classes():
    rep = evaluate([[LW, PW, PW, PPH]], [[LW, PW, LW, PPH]])
    assert rep.macro_f1 == pytest.approx((2 / 3 + 1.0 + 0.0) / 3)


def test_format_table_layout():
    rep = evaluate([[PW, PPH]], [[PW, PPH]])
    table = format_table({"full": rep, "no_sswp": rep})
    lines = table.splitlines()
    assert "PW prec" in lines[0] and "PPH prec" in lines[0]
    assert lines[2].startswith("full") and lines[3].startswith("no_sswp")
    assert "1.000" in lines[2]
