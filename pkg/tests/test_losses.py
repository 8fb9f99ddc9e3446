import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from asrse3.losses import LossError, MarginFn, ce_loss, huber, lm_loss, slm_loss, td_loss, violation_set


def central_diff(f, q, h=1e-6):
    g = np.zeros_like(q)
    for i in range(q.size):
        e = np.zeros_like(q)
        e[i] = h
        g[i] = (f(q + e) - f(q - e)) / (2 * h)
    return g


@pytest.mark.parametrize("d, loss, grad", [(0.0, 0.0, 0.0), (0.5, 0.125, 0.5), (3.0, 2.5, 1.0), (-3.0, 2.5, -1.0)])
def test_td_loss_branches(d, loss, grad):
    assert td_loss(1.0 + d, 1.0) == pytest.approx((loss, grad), abs=1e-12)


def test_td_loss_rejects_non_finite():
    with pytest.raises(LossError):
        td_loss(float("nan"), 0.0)
    with pytest.raises(LossError):
        huber(np.array([np.inf]))


def test_huber_matches_scalar():
    d = np.linspace(-3, 3, 13)
    loss, grad = huber(d)
    for i, v in enumerate(d):
        assert (loss[i], grad[i]) == pytest.approx(td_loss(v, 0.0))


@pytest.mark.parametrize(
    "q, expert, members, value",
    [
        ([1.0, 0.95, 0.5], 0, [1], 0.05),
        ([1.0, 0.8], 0, [], 0.0),
        ([0.5, 0.9, 0.85], 0, [1, 2], 0.475),
    ],
)
def test_slm_worked_examples(q, expert, members, value):
    assert violation_set(np.array(q), expert, MarginFn(0.1)).tolist() == members
    loss, _ = slm_loss(np.array(q), expert, MarginFn(0.1))
    assert abs(loss - value) < 1e-12


def test_slm_gradient_shape():
    _, g = slm_loss(np.array([0.5, 0.9, 0.85]), 0)
    np.testing.assert_allclose(g, [-1.0, 0.5, 0.5])


def test_lm_examples():
    loss, _ = lm_loss(np.array([1.0, 0.95, 0.5]), 0)
    assert abs(loss - 0.05) < 1e-12
    assert lm_loss(np.array([2.0, 0.5, 1.0]), 0)[0] == 0.0


def test_single_violator_lm_equals_slm():
    q = np.array([1.0, 0.95, 0.5])
    assert lm_loss(q, 0)[0] == slm_loss(q, 0)[0]
    np.testing.assert_array_equal(lm_loss(q, 0)[1], slm_loss(q, 0)[1])


def test_boundary_tie_is_not_a_violation():
    q = np.array([1.0, 0.5, 0.5])
    assert slm_loss(q, 0, MarginFn(0.5))[0] == 0.0


def test_ce_examples():
    for n in (1, 2, 7):
        assert ce_loss(np.full(n, 0.3), 0)[0] == pytest.approx(math.log(n), abs=1e-12)
    assert ce_loss(np.array([2.0, 0.0]), 0, beta=1.0)[0] == pytest.approx(math.log1p(math.exp(-2)), abs=1e-12)
    assert round(ce_loss(np.array([2.0, 0.0]), 0, beta=1.0)[0], 4) == 0.1269
    assert ce_loss(np.array([1e3, 0.0, 0.0]), 0)[0] < 1e-12


def test_masks_drop_actions():
    q = np.array([0.5, 0.9, 0.85])
    mask = np.array([True, False, True])
    loss, g = slm_loss(q, 0, mask=mask)
    assert loss == pytest.approx(0.45) and g[1] == 0.0
    assert lm_loss(q, 0, mask=mask)[0] == pytest.approx(0.45)
    assert ce_loss(q, 0, mask=mask)[1][1] == 0.0
    with pytest.raises(LossError):
        slm_loss(q, 1, mask=mask)
    with pytest.raises(LossError):
        slm_loss(q, 0, mask=np.zeros(3, bool))


def test_margin_validation():
    with pytest.raises(ValueError):
        MarginFn(-0.1)
    assert MarginFn(0.2).row(3, 1).tolist() == [0.2, 0.0, 0.2]


rows = st.lists(st.floats(-2, 2, allow_nan=False), min_size=1, max_size=12).map(np.array)


@settings(max_examples=200)
@given(rows, st.integers(0, 100), st.floats(-5, 5))
def test_margin_losses_are_shift_invariant(q, e, c):
    e %= q.size
    for fn in (slm_loss, lm_loss):
        assert fn(q + c, e)[0] == pytest.approx(fn(q, e)[0], abs=1e-9)


@settings(max_examples=200)
@given(rows, st.integers(0, 100))
def test_slm_zero_iff_empty(q, e):
    e %= q.size
    loss, _ = slm_loss(q, e)
    assert loss >= 0
    assert (loss == 0) == (violation_set(q, e, MarginFn()).size == 0)


@settings(max_examples=200)
@given(rows, st.integers(0, 100), st.floats(0.01, 1.0))
def test_ce_monotone_in_expert(q, e, bump):
    e %= q.size
    if q.size < 2:
        return
    up = q.copy()
    up[e] += bump
    assert ce_loss(up, e)[0] < ce_loss(q, e)[0]


def _smooth_row(rng, n, expert):
    """Random row with every entry well away from the violation boundary."""
    while True:
        q = rng.normal(size=n)
        gap = np.abs(q - (q[expert] - 0.1))
        gap[expert] = 1.0
        top = np.sort(q + MarginFn().row(n, expert))
        if gap.min() > 1e-3 and (n < 2 or top[-1] - top[-2] > 1e-3):
            return q


def test_gradients_match_central_differences():
    rng = np.random.default_rng(0)
    for _ in range(50):
        n = int(rng.integers(2, 9))
        e = int(rng.integers(n))
        q = _smooth_row(rng, n, e)
        for fn in (slm_loss, lm_loss):
            np.testing.assert_allclose(fn(q, e)[1], central_diff(lambda x: fn(x, e)[0], q), atol=1e-6)
        small = 0.3 * q
        np.testing.assert_allclose(ce_loss(small, e)[1], central_diff(lambda x: ce_loss(x, e)[0], small), atol=1e-6)
        d = rng.uniform(-3, 3)
        if abs(abs(d) - 1) > 1e-3:
            assert td_loss(d, 0.0)[1] == pytest.approx((td_loss(d + 1e-6, 0)[0] - td_loss(d - 1e-6, 0)[0]) / 2e-6, abs=1e-6)
