import numpy as np
import pytest

from opshield.errors import LengthMismatch
from opshield.metrics import compute_metrics


def test_worked_example():
    pred = [1] * 8 + [1] * 2 + [0] * 8 + [0] * 2
    true = [1] * 8 + [0] * 2 + [0] * 8 + [1] * 2
    m = compute_metrics(pred, true)
    assert (m.tp, m.fp, m.tn, m.fn) == (8, 2, 8, 2)
    assert m.accuracy == pytest.approx(0.8)
    assert m.precision == pytest.approx(0.8)
    assert m.recall == pytest.approx(0.8)
    assert m.f1 == pytest.approx(0.8)


def test_perfect():
    m = compute_metrics([0, 1, 1, 0], [0, 1, 1, 0])
    assert m.accuracy == m.precision == m.recall == m.f1 == 1.0


def test_undefined_ratios_are_zero():
    m = compute_metrics([0, 0], [0, 0])
    assert m.precision == 0.0 and m.recall == 0.0 and m.f1 == 0.0 and m.accuracy == 1.0


def test_against_recount():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        n = int(rng.integers(1, 60))
        pred, true = rng.integers(0, 2, n), rng.integers(0, 2, n)
        m = compute_metrics(pred, true)
        tp = sum(1 for p, t in zip(pred, true) if p == 1 and t == 1)
        fp = sum(1 for p, t in zip(pred, true) if p == 1 and t == 0)
        tn = sum(1 for p, t in zip(pred, true) if p == 0 and t == 0)
        fn = n - tp - fp - tn
        assert (m.tp, m.fp, m.tn, m.fn) == (tp, fp, tn, fn)
        assert m.accuracy == pytest.approx((tp + tn) / n)
        if tp:
            p, r = tp / (tp + fp), tp / (tp + fn)
            assert m.f1 == pytest.approx(2 * p * r / (p + r))
            assert m.f1 == pytest.approx(2 * tp / (2 * tp + fp + fn))
        assert 0.0 <= m.f1 <= 1.0


@pytest.mark.parametrize("pred, true", [([1, 0], [1]), ([], [])])
def test_length_mismatch(pred, true):
    with pytest.raises(LengthMismatch):
        compute_metrics(pred, true)
