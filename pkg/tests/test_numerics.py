import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fedsim.numerics import (
    RngStream,
    as_params,
    dot,
    l2_norm_sq,
    sample_categorical,
    softmax,
)

finite_floats = st.floats(min_value=-1e3, max_value=1e3, allow_nan=False)
vec_pairs = st.integers(min_value=1, max_value=30).flatmap(
    lambda n: st.tuples(
        st.lists(finite_floats, min_size=n, max_size=n),
        st.lists(finite_floats, min_size=n, max_size=n),
    )
)


class TestDot:
    def test_simple(self):
        assert dot([1.0, 2.0], [3.0, 4.0]) == 11.0

    def test_zero_annihilates(self):
        a = np.array([1.5, -2.0, 3.0])
        assert dot(a, np.zeros(3)) == 0.0

    def test_orthogonal(self):
        assert dot([1.0, 0.0], [0.0, 1.0]) == 0.0

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            dot([1.0], [1.0, 2.0])

    @given(vec_pairs)
    def test_symmetry(self, pair):
        a, b = pair
        assert dot(a, b) == pytest.approx(dot(b, a), abs=1e-12)

    @given(vec_pairs, st.floats(min_value=-10, max_value=10))
    def test_bilinear(self, pair, scale):
        a, b = (np.array(v) for v in pair)
        assert dot(scale * a, b) == pytest.approx(scale * dot(a, b), rel=1e-12, abs=1e-9)
        assert dot(a + a, b) == pytest.approx(2.0 * dot(a, b), rel=1e-12, abs=1e-9)

    def test_index_order_accumulation(self):
        # matches a plain left-to-right loop bit for bit
        gen = np.random.default_rng(0)
        a, b = gen.normal(size=300), gen.normal(size=300)
        acc = 0.0
        for x, y in zip(a, b):
            acc += x * y
        assert dot(a, b) == acc


class TestNormSq:
    def test_three_four_five(self):
        assert l2_norm_sq([3.0, 4.0]) == 25.0

    def test_zero(self):
        assert l2_norm_sq(np.zeros(8)) == 0.0

    def test_ones(self):
        assert l2_norm_sq([1.0, 1.0, 1.0, 1.0]) == 4.0


class TestSoftmax:
    def test_symmetric_pair(self):
        np.testing.assert_allclose(softmax([0.0, 0.0]), [0.5, 0.5])

    def test_large_logit_no_overflow(self):
        out = softmax([1000.0, 0.0])
        assert np.all(np.isfinite(out))
        assert out[0] == pytest.approx(1.0)
        assert out[1] == pytest.approx(0.0, abs=1e-300)

    def test_log_two(self):
        np.testing.assert_allclose(softmax([math.log(2.0), 0.0]), [2 / 3, 1 / 3], atol=1e-15)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            softmax([])

    @given(st.lists(st.floats(min_value=-1e3, max_value=1e3), min_size=1, max_size=40))
    @settings(max_examples=100)
    def test_normalizes(self, z):
        # spreads near 1500 underflow the smallest entries to exactly 0.0,
        # which is fine; the normalization contract is what matters
        out = softmax(z)
        assert abs(out.sum() - 1.0) <= 1e-12
        assert np.all(out >= 0.0)


class TestRngStream:
    def test_same_key_same_draws(self):
        a = RngStream(42, (3,)).generator().random(10)
        b = RngStream(42, (3,)).generator().random(10)
        np.testing.assert_array_equal(a, b)

    def test_different_stream_differs(self):
        a = RngStream(42, (3,)).generator().random(10)
        b = RngStream(42, (4,)).generator().random(10)
        assert not np.array_equal(a, b)

    def test_child_extends_key(self):
        s = RngStream(1, (2,)).child(3, 4)
        assert s.stream == (2, 3, 4)


class TestSampleCategorical:
    def test_degenerate(self, rng):
        out = sample_categorical([1.0, 0.0, 0.0], 5, rng)
        assert list(out) == [0] * 5

    def test_zero_probability_index_never_drawn(self, rng):
        out = sample_categorical([0.0, 1.0], 100, rng)
        assert set(out) == {1}

    def test_fair_coin_frequencies(self, rng):
        draws = sample_categorical([0.5, 0.5], 10_000, rng)
        freq = np.mean(draws == 0)
        assert 0.47 <= freq <= 0.53  # 3 sigma of a fair binomial

    def test_determinism_contract(self):
        s = RngStream(9, (1,))
        a = sample_categorical([0.3, 0.3, 0.4], 50, s)
        b = sample_categorical([0.3, 0.3, 0.4], 50, s)
        np.testing.assert_array_equal(a, b)

    def test_invalid_distribution(self, rng):
        with pytest.raises(ValueError):
            sample_categorical([0.5, 0.4], 1, rng)
        with pytest.raises(ValueError):
            sample_categorical([-0.1, 1.1], 1, rng)

    def test_chi_square_convergence(self, rng):
        from scipy import stats

        p = np.array([0.1, 0.2, 0.3, 0.4])
        draws = sample_categorical(p, 100_000, rng)
        observed = np.bincount(draws, minlength=4)
        _, pvalue = stats.chisquare(observed, p * len(draws))
        assert pvalue > 0.001


class TestAsParams:
    def test_rejects_nan(self):
        with pytest.raises(ValueError):
            as_params([1.0, float("nan")])

    def test_rejects_matrix(self):
        with pytest.raises(ValueError):
            as_params(np.zeros((2, 2)))
