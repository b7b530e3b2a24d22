import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.metrics import f1_score

from fixtures import TEN_FRAMES, hand_oracle
from affectkd.metrics import (
    MetricsReport,
    PredictionSet,
    accuracy,
    evaluate,
    expr_challenge_score,
    macro_f1,
)


def ten_frame_set():
    ids, et, vt, ep, vp = zip(*TEN_FRAMES)
    return PredictionSet.from_lists(et, ep, vt, vp, list(ids))


def test_macro_f1_examples():
    assert macro_f1(list(range(7)) * 2, list(range(7)) * 2) == 1.0
    assert macro_f1([0, 0, 1, 1], [0, 1, 1, 1]) == pytest.approx((2 / 3 + 0.8) / 7, abs=1e-9)
    assert macro_f1([0, 0, 0], [1, 1, 1]) == 0.0
    with pytest.raises(ValueError):
        macro_f1([], [])


def test_macro_f1_agrees_with_sklearn():
    r = np.random.default_rng(0)
    t, p = r.integers(0, 7, 200), r.integers(0, 7, 200)
    for avg in ("macro", "weighted"):
        ref = f1_score(t, p, labels=list(range(7)), average=avg, zero_division=0)
        assert macro_f1(t, p, average=avg) == pytest.approx(ref, abs=1e-12)


def test_accuracy_examples():
    assert accuracy([1, 2, 3], [1, 2, 3]) == 1.0
    assert accuracy([0, 0, 1, 1], [0, 1, 1, 1]) == 0.75
    assert accuracy([0, 1], [2, 3]) == 0.0
    with pytest.raises(ValueError):
        accuracy([], [])


def test_expr_challenge_score():
    assert expr_challenge_score(1, 1) == pytest.approx(1.0, abs=1e-12)
    assert expr_challenge_score(0.3, 0.5) == pytest.approx(0.366, abs=1e-9)
    assert expr_challenge_score(0, 0) == 0.0
    with pytest.raises(ValueError):
        expr_challenge_score(1.2, 0.5)


@given(st.floats(0, 1), st.floats(0, 1), st.floats(0, 1))
def test_expr_challenge_score_monotone(a, b, d):
    hi = min(a + d, 1.0)
    assert expr_challenge_score(hi, b) >= expr_challenge_score(a, b)
    assert expr_challenge_score(b, hi) >= expr_challenge_score(b, a)


def test_evaluate_identity():
    r = np.random.default_rng(3)
    expr = r.integers(0, 7, 50)
    va = r.uniform(-1, 1, (50, 2))
    rep = evaluate(PredictionSet(expr, expr, va, va))
    assert rep.expr_score == pytest.approx(1.0)
    assert rep.valence_ccc == pytest.approx(1.0, abs=1e-6)
    assert rep.arousal_ccc == pytest.approx(1.0, abs=1e-6)


def test_evaluate_ten_frame_fixture_matches_hand_oracle():
    rep = evaluate(ten_frame_set())
    for key, value in hand_oracle(TEN_FRAMES).items():
        assert getattr(rep, key) == pytest.approx(value, abs=1e-9), key
    assert rep.expr_score == pytest.approx(0.67 * rep.macro_f1 + 0.33 * rep.total_accuracy, abs=1e-9)
    assert rep.va_score == pytest.approx((rep.valence_ccc + rep.arousal_ccc) / 2, abs=1e-9)
    assert sum(rep.counts.values()) == 8


def test_report_serialises_with_field_names():
    d = json.loads(evaluate(ten_frame_set()).to_json())
    assert set(d) == {"expr_score", "macro_f1", "total_accuracy", "valence_ccc", "arousal_ccc", "va_score", "counts"}
    assert MetricsReport.from_dict(d) == evaluate(ten_frame_set())


def test_evaluate_single_task_and_errors():
    nan2 = np.full((4, 2), np.nan)
    rep = evaluate(PredictionSet([0, 1, 2, 3], [0, 1, 2, 2], nan2, np.zeros((4, 2))))
    assert rep.va_score is None and rep.expr_score is not None
    with pytest.raises(ValueError, match="usable"):
        evaluate(PredictionSet([-1, -1], [0, 0], np.full((2, 2), np.nan), np.zeros((2, 2))))
    with pytest.raises(ValueError):
        PredictionSet([0], [9], [[0, 0]], [[0, 0]])


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_evaluate_permutation_invariant(seed):
    ps = ten_frame_set()
    perm = np.random.default_rng(seed).permutation(len(ps))
    shuffled = PredictionSet(ps.expr_true[perm], ps.expr_pred[perm], ps.va_true[perm], ps.va_pred[perm])
    a, b = evaluate(ps).to_dict(), evaluate(shuffled).to_dict()
    for k in a:
        if k == "counts":
            assert a[k] == b[k]
        else:
            assert a[k] == pytest.approx(b[k], abs=1e-12)
