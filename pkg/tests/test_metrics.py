import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from structvit.pipeline import metrics


def brute_auc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    credit = 0.0
    for p in pos:
        for n in neg:
            credit += 1.0 if p > n else 0.5 if p == n else 0.0
    return credit / (len(pos) * len(neg))


def test_auc_hand_cases():
    s = [0.9, 0.8, 0.3, 0.2]
    assert metrics.binary_auc(s, [1, 1, 0, 0]) == 1.0
    assert metrics.binary_auc(s, [1, 0, 1, 0]) == 0.75
    assert metrics.binary_auc([0.4] * 4, [1, 0, 1, 0]) == 0.5
    assert metrics.binary_auc(s, [0, 0, 1, 1]) == 0.0


def test_auc_single_class_raises():
    with pytest.raises(ValueError):
        metrics.binary_auc([0.1, 0.2], [1, 1])


def test_auc_matches_brute_force_on_random_instances():
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(1000):
        n = int(rng.integers(2, 40))
        y = rng.integers(0, 2, size=n)
        y[0], y[1] = 0, 1
        # coarse grid so ties are common
        s = rng.integers(0, 6, size=n) / 5.0 if rng.random() < 0.5 else rng.normal(size=n)
        worst = max(worst, abs(metrics.binary_auc(s, y) - brute_auc(s, y)))
    assert worst <= 1e-9


@settings(max_examples=300, deadline=None)
@given(st.lists(st.tuples(st.integers(-3, 3), st.booleans()), min_size=2, max_size=30))
def test_auc_property(pairs):
    s = [float(a) for a, _ in pairs]
    y = [b for _, b in pairs]
    if all(y) or not any(y):
        with pytest.raises(ValueError):
            metrics.binary_auc(s, y)
        return
    a = metrics.binary_auc(s, y)
    assert a == pytest.approx(brute_auc(s, y), abs=1e-12)
    assert metrics.binary_auc([-v for v in s], y) == pytest.approx(1 - a, abs=1e-12)


def test_macro_auc_skips_degenerate_classes():
    scores = np.array([[0.9, 0.1], [0.2, 0.2], [0.8, 0.3]])
    labels = np.array([[1, 1], [0, 1], [1, 1]])
    aucs, skipped = metrics.per_class_auc(scores, labels)
    assert aucs == [1.0, None] and skipped == [1]
    assert metrics.macro_auc(scores, labels) == 1.0


def test_macro_auc_respects_mask():
    scores = np.array([[0.9], [0.2], [0.1], [0.95]])
    labels = np.array([[1], [0], [1], [0]])
    mask = np.array([[True], [True], [False], [False]])
    assert metrics.macro_auc(scores, labels, mask) == 1.0
    # unmasked: only 0.9 > 0.2 of the four pairs is ordered correctly
    assert metrics.macro_auc(scores, labels) == 0.25


def test_macro_auc_all_degenerate():
    with pytest.raises(ValueError):
        metrics.macro_auc(np.ones((3, 2)), np.ones((3, 2)))


def test_f1_cases():
    y = np.array([1, 0, 1, 0, 1, 0])
    assert metrics.f1(y, y) == 1.0
    assert metrics.f1(np.zeros(6), y) == 0.0
    pred = np.array([1, 1, 1, 0, 0, 0])  # TP=2, FP=1, FN=1
    assert metrics.f1(pred, y) == pytest.approx(2 / 3, abs=1e-15)


def test_macro_f1_threshold_and_classes_without_positives():
    scores = np.array([[0.5, 0.9], [0.49, 0.1], [0.7, 0.8]])
    labels = np.array([[1, 0], [0, 0], [1, 0]])
    assert metrics.per_class_f1(scores, labels) == [1.0, None]
    assert metrics.macro_f1(scores, labels) == 1.0
