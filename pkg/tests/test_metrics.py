import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dendron.metrics import (
    AccuracyMatrix,
    average_accuracy,
    cumulative_accuracy_curve,
    forgetting_measure,
)


def test_average_accuracy_examples():
    assert average_accuracy([[0.9]]) == pytest.approx(0.9)
    assert average_accuracy([[1.0], [1.0, 1.0]]) == 1.0
    assert average_accuracy([[0.9], [0.8, 0.85]]) == pytest.approx(0.825)


def test_forgetting_examples():
    assert forgetting_measure([[0.9], [0.9, 0.7], [0.9, 0.7, 0.6]]) == 0.0
    assert forgetting_measure([[0.9], [0.8, 0.85]]) == pytest.approx(0.1)
    # backward transfer shows up as negative forgetting
    assert forgetting_measure([[0.5], [0.7, 0.9]]) == pytest.approx(-0.2)


def test_forgetting_uses_best_past_accuracy():
    a = [[0.5], [0.9, 0.8], [0.6, 0.8, 0.7]]
    # f0 = max(0.5, 0.9) - 0.6, f1 = 0.8 - 0.8
    assert forgetting_measure(a) == pytest.approx((0.3 + 0.0) / 2)


def test_forgetting_needs_two_tasks():
    with pytest.raises(ValueError):
        forgetting_measure([[0.9]])


def test_cumulative_curve_examples():
    assert cumulative_accuracy_curve([[0.7], [0.7, 0.7], [0.7, 0.7, 0.7]]) == [
        (0, 0.7), (1, 0.7), (2, pytest.approx(0.7))]
    curve = cumulative_accuracy_curve([[0.9], [0.2, 0.9], [0.1, 0.2, 0.9]])
    assert [round(v, 10) for _, v in curve] == [0.9, 0.55, 0.4]
    assert cumulative_accuracy_curve([[0.3]]) == [(0, 0.3)]


def test_matrix_record_and_rows():
    m = AccuracyMatrix(3)
    m.record(0, 0, 0.5)
    m.record(1, 0, 0.4)
    m.record(1, 1, 0.6)
    assert m.completed_rows() == 2
    assert average_accuracy(m) == pytest.approx(0.5)
    with pytest.raises(IndexError):
        m.record(0, 1, 0.5)
    with pytest.raises(ValueError):
        m.record(2, 0, 1.5)


lower_triangular = st.integers(2, 6).flatmap(
    lambda t: st.lists(st.floats(0, 1), min_size=t * (t + 1) // 2,
                       max_size=t * (t + 1) // 2).map(
        lambda v: [v[k * (k + 1) // 2 : k * (k + 1) // 2 + k + 1] for k in range(t)]))


@given(lower_triangular)
def test_acc_is_last_curve_point(a):
    assert average_accuracy(a) == cumulative_accuracy_curve(a)[-1][1]


@given(lower_triangular)
def test_constant_columns_give_zero_forgetting(a):
    t = len(a)
    diag = [a[j][j] for j in range(t)]
    frozen = [[diag[j] for j in range(k + 1)] for k in range(t)]
    assert forgetting_measure(frozen) == 0.0


@given(lower_triangular, st.randoms())
def test_permutation_covariance(a, rnd):
    """Relabelling tasks inside every row leaves the row means unchanged."""
    t = len(a)
    full = np.full((t, t), np.nan)
    for k, row in enumerate(a):
        full[k, : k + 1] = row
    last = list(full[-1])
    rnd.shuffle(last)
    permuted = [list(r[: k + 1]) for k, r in enumerate(full[:-1])] + [last]
    assert average_accuracy(permuted) == pytest.approx(average_accuracy(a))
