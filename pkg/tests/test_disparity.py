import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mefilter.disparity import EPS_D, DisparityGroup, clamp, d_compose, d_exp, d_exp_derivative, d_inverse, d_log

unit = st.floats(0.001, 0.999)


@pytest.mark.parametrize("x, y, expected", [(0.5, 0.3, 0.3), (0.25, 0.25, 0.1), (0.7, 0.3, 0.5), (0.9, 0.1, 0.5)])
def test_compose_examples(x, y, expected):
    assert d_compose(x, y) == pytest.approx(expected, abs=1e-15)


@pytest.mark.parametrize("x, expected", [(0.5, 0.5), (0.2, 0.8)])
def test_inverse_examples(x, expected):
    assert d_inverse(x) == pytest.approx(expected, abs=1e-15)


def test_exp_examples():
    assert d_exp(0.0) == 0.5
    assert d_exp(0.1) == pytest.approx(0.598688, abs=1e-6)
    assert d_exp(1e6) == 1 - EPS_D
    assert d_exp(-1e6) == EPS_D


def test_log_examples():
    assert d_log(0.5) == 0.0
    assert d_log(0.598688) == pytest.approx(0.1, abs=1e-6)
    assert d_log(0.1) == pytest.approx(-0.549306, abs=1e-6)


def test_clamp_keeps_entries_inside_band():
    np.testing.assert_array_equal(clamp([0.0, 1.0, 0.3]), [EPS_D, 1 - EPS_D, 0.3])
    assert np.isfinite(d_log(0.0)) and np.isfinite(d_log(1.0))


def test_homomorphism_on_1000_pairs(rng):
    x, y = rng.uniform(0.01, 0.99, (2, 1000))
    np.testing.assert_allclose(d_log(d_compose(x, y)), d_log(x) + d_log(y), rtol=0, atol=1e-10)


@given(unit, unit)
def test_abelian(x, y):
    assert d_compose(x, y) == d_compose(y, x)


@given(unit)
def test_identity_and_inverse_laws(x):
    assert d_compose(x, 0.5) == pytest.approx(x, rel=1e-15)
    assert d_compose(x, d_inverse(x)) == pytest.approx(0.5, abs=1e-15)


@given(unit)
def test_exp_log_round_trip(x):
    assert d_exp(d_log(x)) == pytest.approx(x, abs=1e-12)


def test_exp_derivative_at_zero_is_one():
    h = 1e-5
    fd = (d_exp(np.full(3, h)) - d_exp(np.full(3, -h))) / (2 * h)
    np.testing.assert_allclose(fd, 1.0, atol=1e-8)
    np.testing.assert_array_equal(d_exp_derivative(np.full(3, 0.5)), 1.0)


def test_group_object_is_componentwise(rng):
    G = DisparityGroup(4)
    t = rng.normal(size=4)
    np.testing.assert_allclose(G.log(G.exp(t)), t, atol=1e-12)
    np.testing.assert_array_equal(G.identity(), 0.5)
    np.testing.assert_array_equal(G.bracket(t, t[::-1]), 0.0)
