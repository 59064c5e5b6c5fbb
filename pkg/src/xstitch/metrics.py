"""Tagging, diarization-turn and classification metrics."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import NamedTuple, Sequence


class MetricError(ValueError):
    pass


def _same_length(a, b) -> None:
    if len(a) != len(b):
        raise MetricError(f"length mismatch: {len(a)} predictions vs {len(b)} references")


@dataclass
class TagScore:
    precision: float
    recall: float
    f1: float
    support: int


@dataclass
class TagReport:
    per_tag: dict[str, TagScore] = field(default_factory=dict)
    macro_f1: float = 0.0

    def to_dict(self) -> dict:
        return {"per_tag": {k: asdict(v) for k, v in self.per_tag.items()},
                "macro_f1": self.macro_f1}


def _prf(tp: int, fp: int, fn: int) -> tuple[float, float, float]:
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    f = 2 * p * r / (p + r) if p + r else 0.0
    return p, r, f


def per_tag_f1(pred: Sequence, gold: Sequence, names: Sequence[str] | None = None) -> TagReport:
    """One-vs-rest P/R/F1 per tag; macro average over tags with gold support.

    Tags that never occur in gold or predictions are left out of the report.
    """
    _same_length(pred, gold)
    labels = sorted(set(gold) | set(pred))
    report = TagReport()
    f1s = []
    for t in labels:
        tp = sum(1 for p, g in zip(pred, gold) if p == t and g == t)
        fp = sum(1 for p, g in zip(pred, gold) if p == t and g != t)
        fn = sum(1 for p, g in zip(pred, gold) if p != t and g == t)
        p, r, f = _prf(tp, fp, fn)
        support = tp + fn
        key = names[t] if names is not None else str(t)
        report.per_tag[key] = TagScore(p, r, f, support)
        if support > 0:
            f1s.append(f)
    report.macro_f1 = sum(f1s) / len(f1s) if f1s else 0.0
    return report


def token_error_rate(pred: Sequence, gold: Sequence) -> float:
    _same_length(pred, gold)
    if not gold:
        raise MetricError("token error rate of an empty sequence")
    return 100.0 * sum(1 for p, g in zip(pred, gold) if p != g) / len(gold)


class Turn(NamedTuple):
    start: int
    end: int      # inclusive
    label: int


def segment_turns(labels: Sequence[int]) -> list[Turn]:
    """Maximal runs of identical labels."""
    turns: list[Turn] = []
    start = 0
    for i in range(1, len(labels) + 1):
        if i == len(labels) or labels[i] != labels[start]:
            turns.append(Turn(start, i - 1, labels[start]))
            start = i
    return turns


@dataclass
class TurnReport:
    precision: float
    recall: float
    f1: float
    correct: int
    detected: int
    actual: int

    def to_dict(self) -> dict:
        return asdict(self)


def turn_prf(pred_turns: Sequence[Turn], ref_turns: Sequence[Turn]) -> TurnReport:
    """A predicted turn is correct when a reference turn has the same span and label."""
    n_pred = pred_turns[-1][1] + 1 if pred_turns else 0
    n_ref = ref_turns[-1][1] + 1 if ref_turns else 0
    if n_pred != n_ref:
        raise MetricError(f"turns cover {n_pred} vs {n_ref} tokens")
    ref = {tuple(t) for t in ref_turns}
    correct = sum(1 for t in pred_turns if tuple(t) in ref)
    return _turn_report(correct, len(pred_turns), len(ref_turns))


def _turn_report(correct: int, detected: int, actual: int) -> TurnReport:
    p = correct / detected if detected else 0.0
    r = correct / actual if actual else 0.0
    f = 2 * p * r / (p + r) if p + r else 0.0
    return TurnReport(p, r, f, correct, detected, actual)


def corpus_turn_prf(preds: Sequence[Sequence[int]], golds: Sequence[Sequence[int]]) -> TurnReport:
    """Turn P/R/F pooled over many utterances."""
    _same_length(preds, golds)
    correct = detected = actual = 0
    for p, g in zip(preds, golds):
        _same_length(p, g)
        r = turn_prf(segment_turns(p), segment_turns(g))
        correct += r.correct
        detected += r.detected
        actual += r.actual
    return _turn_report(correct, detected, actual)


def accuracy(pred: Sequence, gold: Sequence) -> float:
    _same_length(pred, gold)
    if not gold:
        raise MetricError("accuracy of an empty sequence")
    return 100.0 * sum(1 for p, g in zip(pred, gold) if p == g) / len(gold)


def joint_accuracy(pred: Sequence[tuple], gold: Sequence[tuple]) -> float:
    """Percentage of samples where every component is correct."""
    _same_length(pred, gold)
    if not gold:
        raise MetricError("accuracy of an empty sequence")
    return 100.0 * sum(1 for p, g in zip(pred, gold) if tuple(p) == tuple(g)) / len(gold)
