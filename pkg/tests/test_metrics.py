import json

import pytest
from hypothesis import given, settings, strategies as st

from xstitch.metrics import (
    MetricError, Turn, accuracy, corpus_turn_prf, joint_accuracy, per_tag_f1, segment_turns,
    token_error_rate, turn_prf,
)

labels_st = st.lists(st.integers(0, 1), min_size=1, max_size=40)


# ---------------------------------------------------------------- per-tag F1


def test_perfect_tagging():
    rep = per_tag_f1([0, 1, 2, 1], [0, 1, 2, 1])
    assert rep.macro_f1 == 1.0
    assert all(s.f1 == 1.0 for s in rep.per_tag.values())


def test_single_class_prediction_on_balanced_gold():
    gold = [0] * 5 + [1] * 5
    rep = per_tag_f1([0] * 10, gold)
    assert abs(rep.per_tag["0"].f1 - 2 / 3) < 1e-12
    assert rep.per_tag["1"].f1 == 0.0
    assert abs(rep.macro_f1 - 1 / 3) < 1e-12


def test_absent_tag_adds_no_macro_term():
    rep = per_tag_f1([0, 1, 0], [0, 1, 0], names=["a", "b", "c"])
    assert "c" not in rep.per_tag
    assert rep.macro_f1 == 1.0
    # predicted but absent from gold: reported with support 0, still outside the macro mean
    rep = per_tag_f1([0, 2, 0], [0, 1, 0], names=["a", "b", "c"])
    assert rep.per_tag["c"].support == 0
    assert rep.macro_f1 == pytest.approx(0.5)


def test_tag_report_json():
    rep = per_tag_f1([0, 1], [0, 0], names=["x", "y"])
    d = json.loads(json.dumps(rep.to_dict()))
    assert set(d) == {"per_tag", "macro_f1"}
    assert set(d["per_tag"]["x"]) == {"precision", "recall", "f1", "support"}


def test_length_mismatch_errors():
    for fn in (per_tag_f1, token_error_rate, accuracy):
        with pytest.raises(MetricError):
            fn([0, 1], [0])
    with pytest.raises(MetricError):
        joint_accuracy([(0, 0)], [])
    with pytest.raises(MetricError):
        turn_prf(segment_turns([0, 1]), segment_turns([0, 1, 1]))


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 3), st.integers(0, 3)), min_size=1, max_size=30),
       st.permutations([0, 1, 2, 3]))
def test_macro_f1_invariant_to_renumbering(pairs, perm):
    pred, gold = [p for p, _ in pairs], [g for _, g in pairs]
    a = per_tag_f1(pred, gold).macro_f1
    b = per_tag_f1([perm[p] for p in pred], [perm[g] for g in gold]).macro_f1
    assert abs(a - b) < 1e-12
    assert 0.0 <= a <= 1.0


# ---------------------------------------------------------------- token error rate


def test_ter_examples():
    assert token_error_rate([1, 0, 1], [1, 0, 1]) == 0.0
    gold = [0] * 10
    assert token_error_rate([1] + [0] * 9, gold) == pytest.approx(10.0)
    assert token_error_rate([1, 0, 1, 1], [0, 1, 0, 0]) == 100.0


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 1), st.integers(0, 1)), min_size=1, max_size=40))
def test_ter_is_complement_of_accuracy(pairs):
    pred, gold = [p for p, _ in pairs], [g for _, g in pairs]
    assert abs(token_error_rate(pred, gold) - (100.0 - accuracy(pred, gold))) < 1e-9


# ---------------------------------------------------------------- turns


def test_segment_turns_examples():
    assert segment_turns([1, 1, 0, 0, 1]) == [(0, 1, 1), (2, 3, 0), (4, 4, 1)]
    assert segment_turns([0, 0, 0]) == [Turn(0, 2, 0)]
    assert segment_turns([1, 0, 1]) == [(0, 0, 1), (1, 1, 0), (2, 2, 1)]


@settings(max_examples=80, deadline=None)
@given(labels_st)
def test_segment_turns_partition(labels):
    turns = segment_turns(labels)
    assert turns[0].start == 0 and turns[-1].end == len(labels) - 1
    for a, b in zip(turns, turns[1:]):
        assert b.start == a.end + 1
        assert a.label != b.label
    for t in turns:
        assert t.start <= t.end
        assert all(labels[i] == t.label for i in range(t.start, t.end + 1))


def test_turn_prf_examples():
    ref = segment_turns([1, 1, 0, 0, 1])
    perfect = turn_prf(ref, ref)
    assert perfect.precision == perfect.recall == perfect.f1 == 1.0
    rep = turn_prf(segment_turns([1, 1, 0, 1, 1]), ref)
    assert (rep.correct, rep.detected, rep.actual) == (1, 3, 3)
    assert rep.precision == rep.recall == pytest.approx(1 / 3)
    assert rep.f1 == pytest.approx(1 / 3)
    flipped = turn_prf(segment_turns([0, 0, 1, 1, 0]), ref)
    assert flipped.correct == 0 and flipped.f1 == 0.0


@settings(max_examples=80, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 1), st.integers(0, 1)), min_size=1, max_size=30))
def test_turn_prf_swap_symmetry(pairs):
    a, b = [p for p, _ in pairs], [g for _, g in pairs]
    ab = turn_prf(segment_turns(a), segment_turns(b))
    ba = turn_prf(segment_turns(b), segment_turns(a))
    assert ab.precision == ba.recall and ab.recall == ba.precision and ab.f1 == ba.f1
    if ab.precision + ab.recall > 0:
        assert abs(ab.f1 - 2 * ab.precision * ab.recall / (ab.precision + ab.recall)) < 1e-12


def test_corpus_turn_prf_pools_counts():
    rep = corpus_turn_prf([[1, 1, 0, 1, 1], [0, 0]], [[1, 1, 0, 0, 1], [0, 0]])
    assert (rep.correct, rep.detected, rep.actual) == (2, 4, 4)
    assert rep.f1 == pytest.approx(0.5)


# ---------------------------------------------------------------- accuracy


def test_accuracy_examples():
    assert accuracy([1, 2, 3], [1, 2, 3]) == 100.0
    assert joint_accuracy([(1, 0)], [(1, 1)]) == 0.0
    assert joint_accuracy([(0, 0), (1, 0), (2, 2)], [(0, 0), (1, 1), (0, 2)]) == pytest.approx(33.333333, abs=1e-4)
