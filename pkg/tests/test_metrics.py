import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dcgn.metrics import (
    ExamplePrediction,
    PredictionSet,
    UndefinedMetricError,
    gap,
    hit_at_1,
    top_predictions,
)


def make(examples):
    """examples: list of (labels, [(class, conf), ...])"""
    return PredictionSet([ExamplePrediction(f"e{i}", frozenset(lab), list(top))
                          for i, (lab, top) in enumerate(examples)])


def test_gap_perfect_single():
    assert gap(make([({2}, [(2, 0.9), (1, 0.1)])])) == 1.0


def test_gap_correct_ranked_second():
    assert gap(make([({2}, [(1, 0.9), (2, 0.1)])])) == 0.5


def test_gap_needs_positives():
    with pytest.raises(UndefinedMetricError):
        gap(make([(set(), [(0, 0.5)])]))


def test_gap_counts_positives_missing_from_top_n():
    preds = PredictionSet(top_n=1)
    preds.add("a", np.array([0.9, 0.8]), [0, 1])
    # one hit at rank 1, but two positives exist
    assert gap(preds) == 0.5


def test_gap_two_examples_hand_computed():
    preds = make([({0}, [(0, 0.9), (1, 0.5)]), ({1}, [(0, 0.8), (1, 0.3)])])
    # merged: e0/0 hit, e1/0 miss, e0/1 miss, e1/1 hit -> (1/1 + 2/4) / 2
    assert gap(preds) == pytest.approx(0.75, abs=1e-15)


def test_gap_ties_break_by_example_then_class():
    preds = make([({1}, [(0, 0.5), (1, 0.5)]), ({0}, [(0, 0.5)])])
    # order: e0/0 miss, e0/1 hit, e1/0 hit -> (1/2 + 2/3) / 2
    assert gap(preds) == pytest.approx((0.5 + 2 / 3) / 2, abs=1e-15)


def test_top_predictions_sorted_and_capped(rng):
    scores = rng.uniform(size=30)
    top = top_predictions(scores, 20)
    assert len(top) == 20
    confs = [c for _, c in top]
    assert confs == sorted(confs, reverse=True)
    assert len({c for c, _ in top}) == 20


def random_set(rng, top_n=20):
    preds = PredictionSet(top_n=top_n)
    n_ex = int(rng.integers(1, 6))
    n_cls = int(rng.integers(1, 7))
    for i in range(n_ex):
        labels = [c for c in range(n_cls) if rng.random() < 0.4]
        preds.add(f"x{i}", rng.uniform(size=n_cls), labels)
    return preds


def _positives(preds):
    return sum(len(e.labels) for e in preds.examples)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31))
def test_gap_invariant_under_monotone_transforms(seed):
    rng = np.random.default_rng(seed)
    preds = random_set(rng)
    if _positives(preds) == 0:
        return
    base = gap(preds)
    for fn in (lambda x: x ** 3, lambda x: 1 / (1 + np.exp(-x))):
        moved = PredictionSet([ExamplePrediction(e.id, e.labels, [(c, float(fn(v))) for c, v in e.top])
                               for e in preds.examples], preds.top_n)
        assert gap(moved) == base


def test_gap_is_one_iff_hits_outrank_misses(rng):
    for _ in range(200):
        preds = random_set(rng)
        if _positives(preds) == 0:
            continue
        hits = [v for e in preds.examples for c, v in e.top if c in e.labels]
        misses = [v for e in preds.examples for c, v in e.top if c not in e.labels]
        all_in_top = all(e.labels <= {c for c, _ in e.top} for e in preds.examples)
        clean = all_in_top and (not misses or not hits or min(hits) > max(misses))
        assert (gap(preds) == 1.0) == clean


def test_hit_at_1():
    assert hit_at_1(make([({0}, [(0, 0.9)]), ({1}, [(1, 0.3), (0, 0.1)])])) == 1.0
    assert hit_at_1(make([({0}, [(1, 0.9)]), ({1}, [(0, 0.3)])])) == 0.0
    three = make([({0}, [(0, 0.9)]), ({1}, [(1, 0.9)]), ({2}, [(1, 0.9), (2, 0.1)])])
    assert hit_at_1(three) == pytest.approx(2 / 3)


def test_hit_at_1_ignores_lower_ranks(rng):
    preds = random_set(rng)
    truncated = PredictionSet([ExamplePrediction(e.id, e.labels, e.top[:1]) for e in preds.examples])
    assert hit_at_1(preds) == hit_at_1(truncated)
