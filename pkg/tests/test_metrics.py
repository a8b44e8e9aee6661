import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from caudg.metrics import accuracy, aggregate_seeds, confusion_matrix, macro_f1, per_class_prf

from .oracles import macro_f1_oracle


def test_perfect_and_all_wrong():
    cm = np.array([[2, 0], [0, 2]])
    assert accuracy(cm) == 1.0 and macro_f1(cm) == 1.0
    wrong = np.array([[0, 3], [2, 0]])
    assert accuracy(wrong) == 0.0 and macro_f1(wrong) == 0.0


def test_macro_f1_hand_example():
    cm = np.array([[1, 1], [0, 2]])
    assert accuracy(cm) == 0.75
    p, r, f = per_class_prf(cm)
    np.testing.assert_allclose(p, [1.0, 2 / 3])
    np.testing.assert_allclose(r, [0.5, 1.0])
    np.testing.assert_allclose(f, [2 / 3, 0.8])
    assert macro_f1(cm) == pytest.approx(0.733333333333, abs=1e-9)


def test_class_without_support_counts_zero():
    cm = np.array([[3, 0, 0], [0, 2, 0], [0, 0, 0]])
    assert macro_f1(cm) == pytest.approx(2 / 3)


def test_confusion_from_labels():
    cm = confusion_matrix([0, 0, 1, 2, 2], [0, 1, 1, 2, 0], 3)
    assert cm.tolist() == [[1, 1, 0], [0, 1, 0], [1, 0, 1]]
    assert cm.sum() == 5


@settings(max_examples=300, deadline=None)
@given(arrays(np.int64, st.tuples(st.integers(1, 8)).map(lambda t: (t[0], t[0])), elements=st.integers(0, 50)))
def test_accuracy_and_f1_match_oracles(cm):
    total = int(cm.sum())
    expect = sum(cm[i, i] for i in range(len(cm))) / total if total else 0.0
    assert accuracy(cm) == pytest.approx(expect, abs=1e-15)
    assert macro_f1(cm) == pytest.approx(macro_f1_oracle(cm.tolist()), abs=1e-12)
    assert 0.0 <= macro_f1(cm) <= 1.0


def test_seed_aggregation_examples():
    mean, half = aggregate_seeds([90, 94])
    assert mean == 92
    assert half == pytest.approx(12.706 * 2.828 / math.sqrt(2), rel=1e-3)
    assert half == pytest.approx(25.4, abs=0.05)
    mean, half = aggregate_seeds([80, 85, 90])
    assert mean == 85
    assert half == pytest.approx(4.303 * 5 / math.sqrt(3), rel=1e-3)
    assert half == pytest.approx(12.42, abs=0.01)
    assert aggregate_seeds([7, 7, 7]) == (7.0, 0.0)


def test_seed_aggregation_needs_two():
    with pytest.raises(ValueError):
        aggregate_seeds([91.0])
    with pytest.raises(ValueError):
        aggregate_seeds([])
