import numpy as np
import pytest
from hypothesis import given, strategies as st

from bangforge.tensorops import clamp_round_pixels, l2_norm, round_half_away


def test_l2_norm_345_triangle():
    assert l2_norm(np.array([3.0, 4.0])) == pytest.approx(5.0, abs=0.0)


def test_l2_norm_zero_tensor_any_shape():
    assert l2_norm(np.zeros((3, 2, 4))) == 0.0
    assert l2_norm(np.zeros(0)) == 0.0


def test_l2_norm_ones():
    # sqrt(4) by hand
    assert l2_norm(np.ones(4)) == pytest.approx(2.0, abs=0.0)


def test_l2_norm_zero_iff_all_zero():
    t = np.zeros((4, 4))
    assert l2_norm(t) == 0.0
    t[2, 3] = 1e-300
    assert l2_norm(t) > 0.0


@given(st.floats(min_value=-1e6, max_value=1e6, allow_nan=False),
       st.integers(min_value=1, max_value=30))
def test_l2_norm_absolute_homogeneity(a, n):
    rng = np.random.default_rng(n)
    t = rng.normal(size=n)
    lhs = l2_norm(a * t)
    rhs = abs(a) * l2_norm(t)
    assert lhs == pytest.approx(rhs, rel=1e-12, abs=1e-300)


def test_clamp_round_pixels_clamps_and_rounds():
    out = clamp_round_pixels(np.array([-3.2, 12.6, 260.0]))
    np.testing.assert_array_equal(out, [0.0, 13.0, 255.0])


def test_clamp_round_pixels_identity_on_integral_image():
    img = np.arange(0, 256, dtype=np.float64).reshape(16, 16)
    np.testing.assert_array_equal(clamp_round_pixels(img), img)


def test_round_half_away_from_zero():
    # documented rounding rule: halves move away from zero
    np.testing.assert_array_equal(clamp_round_pixels(np.array([127.5])), [128.0])
    np.testing.assert_array_equal(round_half_away(np.array([0.5, 1.5, 2.5, -0.5, -1.5])),
                                  [1.0, 2.0, 3.0, -1.0, -2.0])


@given(st.integers(min_value=0, max_value=2**32 - 1))
def test_clamp_round_idempotent(seed):
    rng = np.random.default_rng(seed)
    t = rng.uniform(-50, 305, size=(5, 5))
    once = clamp_round_pixels(t)
    np.testing.assert_array_equal(clamp_round_pixels(once), once)
    assert once.min() >= 0.0 and once.max() <= 255.0
