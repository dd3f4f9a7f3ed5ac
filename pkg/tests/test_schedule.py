from fractions import Fraction
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from ocmdiff.schedule import (
    Trajectory,
    alpha_bar_ratio,
    beta_tilde,
    beta_tilde_clipped,
    even_trajectory,
    make_cosine,
    make_linear,
    make_schedule,
)


def exact_product(values):
    """Product of floats in exact rational arithmetic."""
    out = Fraction(1)
    for v in values:
        out *= Fraction(float(v))
    return float(out)


class TestLinear:
    def test_single_step(self):
        s = make_linear(1, 0.1, 0.1)
        np.testing.assert_array_equal(s.betas, [0.1])
        assert s.alpha_bar(1) == pytest.approx(0.9, abs=1e-15)

    def test_two_steps(self):
        s = make_linear(2, 0.1, 0.3)
        assert s.alpha_bar(2) == pytest.approx(0.63, abs=1e-15)

    def test_long_product_matches_exact_rational(self):
        s = make_linear(1000)
        want = exact_product(1.0 - s.betas)
        assert abs(s.alpha_bar(1000) - want) <= 1e-12 * want

    def test_alpha_bar_zero_is_one(self):
        assert make_linear(10).alpha_bar(0) == 1.0

    @pytest.mark.parametrize("args", [(0,), (10, 0.0, 0.02), (10, 0.1, 0.01), (10, 1e-4, 1.0), (10, float("nan"), 0.02)])
    def test_rejects_bad_parameters(self, args):
        with pytest.raises(ValueError):
            make_linear(*args)


class TestCosine:
    def test_endpoint_tiny(self):
        s = make_cosine(1000)
        assert s.alpha_bar(0) == 1.0
        assert s.alpha_bar(1000) < 1e-4

    @pytest.mark.parametrize("T", [10, 100, 1000])
    def test_strictly_decreasing(self, T):
        ab = np.concatenate([[1.0], make_cosine(T).alpha_bars])
        assert np.all(np.diff(ab) < 0)

    def test_betas_clipped(self):
        s = make_cosine(1000)
        assert s.betas.max() <= 0.999
        np.testing.assert_allclose(np.cumprod(1.0 - s.betas), s.alpha_bars, rtol=1e-15)

    def test_unclipped_values_follow_cos_squared(self):
        T, off = 1000, 0.008
        s = make_cosine(T)
        f = lambda t: math.cos((t / T + off) / (1 + off) * math.pi / 2) ** 2
        for t in (1, 10, 500, 900):
            assert s.alpha_bar(t) == pytest.approx(f(t) / f(0), rel=1e-12)


class TestSerialization:
    @pytest.mark.parametrize("sched", [make_linear(50, 1e-3, 0.05), make_cosine(70, 0.01)])
    def test_roundtrip(self, sched):
        back = make_schedule(sched.to_dict())
        np.testing.assert_array_equal(back.betas, sched.betas)
        assert "betas" not in sched.to_dict()

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            make_schedule({"kind": "sigmoid", "T": 10})


class TestRatio:
    def test_from_zero(self):
        s = make_linear(100)
        assert alpha_bar_ratio(s, 0, 37) == s.alpha_bar(37)

    @given(st.integers(1, 1000))
    def test_adjacent_is_alpha(self, t):
        s = make_linear(1000)
        assert alpha_bar_ratio(s, t - 1, t) == pytest.approx(1.0 - s.betas[t - 1], abs=1e-12)

    def test_explicit_product(self):
        s = make_linear(4)
        assert alpha_bar_ratio(s, 1, 3) == pytest.approx(exact_product(1.0 - s.betas[1:3]), rel=1e-14)

    @pytest.mark.parametrize("lo,hi", [(3, 3), (4, 2), (-1, 2), (0, 101)])
    def test_rejects_bad_order(self, lo, hi):
        with pytest.raises(ValueError):
            alpha_bar_ratio(make_linear(100), lo, hi)


class TestTrajectory:
    def test_identity(self):
        assert even_trajectory(make_linear(1000), 1000).steps == tuple(range(1001))

    def test_exact_division(self):
        assert even_trajectory(make_linear(1000), 10).steps == tuple(range(0, 1001, 100))

    def test_rounding_k7(self):
        # i*1000/7 rounded half-up by hand: 142.86, 285.71, 428.57, 571.43, 714.29, 857.14
        want = (0, 143, 286, 429, 571, 714, 857, 1000)
        assert even_trajectory(make_linear(1000), 7).steps == want

    def test_half_rounds_up(self):
        # T=10, K=4: 2.5 -> 3, 5, 7.5 -> 8
        assert even_trajectory(make_linear(10), 4).steps == (0, 3, 5, 8, 10)

    @given(st.integers(1, 300), st.data())
    def test_properties(self, T, data):
        K = data.draw(st.integers(1, T))
        tr = even_trajectory(make_linear(T), K)
        assert tr.K == K and tr.steps[0] == 0 and tr.steps[-1] == T
        assert all(b > a for a, b in zip(tr.steps, tr.steps[1:]))

    def test_transitions_order(self):
        assert Trajectory((0, 2, 5)).transitions() == [(5, 2), (2, 0)]

    @pytest.mark.parametrize("K", [0, 11, 2.5])
    def test_rejects_bad_K(self, K):
        with pytest.raises(ValueError):
            even_trajectory(make_linear(10), K)

    def test_rejects_non_increasing(self):
        with pytest.raises(ValueError):
            Trajectory((0, 3, 3))


class TestBetaTilde:
    def test_one_step_formula(self):
        s = make_linear(100)
        t = 40
        want = (1 - s.alpha_bar(t - 1)) / (1 - s.alpha_bar(t)) * s.betas[t - 1]
        assert beta_tilde(s, t, t - 1) == pytest.approx(want, rel=1e-14)

    def test_zero_at_origin_and_clipped(self):
        s = make_linear(100)
        assert beta_tilde(s, 10, 0) == 0.0
        assert beta_tilde_clipped(s, 10, 0) == beta_tilde(s, 2, 1) > 0
        assert beta_tilde_clipped(s, 10, 5) == beta_tilde(s, 10, 5)
