from fractions import Fraction

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from weathersr.errors import ConfigurationError, DomainError, ShapeError
from weathersr.grid import GridField
from weathersr.schedule import NoiseSchedule, forward_noise, make_linear_schedule, noise_batch


@pytest.fixture(scope="module")
def full():
    return make_linear_schedule(1000, 1e-6, 1e-2)


def exact_beta(t, T=1000, b0=Fraction(1, 10**6), b1=Fraction(1, 100)):
    return b0 + Fraction(t - 1, T - 1) * (b1 - b0)


class TestLinearSchedule:
    def test_endpoints(self, full):
        assert full.T == 1000
        assert full.beta_at(1) == 1e-6
        assert full.beta_at(1000) == 1e-2

    def test_midpoint_against_rational_oracle(self, full):
        # frozen from exact rational arithmetic: 1e-6 + 499/999 * (1e-2 - 1e-6)
        assert float(exact_beta(500)) == pytest.approx(4.995495495495495e-3, rel=1e-15)
        assert full.beta_at(500) == pytest.approx(4.995495495495495e-3, rel=1e-12)

    def test_every_beta_matches_rational_oracle(self, full):
        oracle = np.array([float(exact_beta(t)) for t in range(1, 1001)])
        np.testing.assert_allclose(full.beta, oracle, rtol=1e-12)

    def test_tables(self, full):
        assert np.array_equal(full.alpha, 1.0 - full.beta)
        assert full.alpha_bar[0] == 1.0 - full.beta[0]
        assert np.all(np.diff(full.alpha_bar) < 0)
        assert 0 < full.alpha_bar[-1] < full.alpha_bar[0] < 1
        np.testing.assert_allclose(full.alpha_bar[1:], full.alpha_bar[:-1] * full.alpha[1:], rtol=1e-12)
        assert np.all(np.diff(full.beta) >= 0)

    def test_tables_immutable(self, full):
        with pytest.raises(ValueError):
            full.beta[0] = 0.5

    @pytest.mark.parametrize("args", [(1, 1e-4, 1e-2), (10, 0.0, 1e-2), (10, 1e-2, 1e-3), (10, 1e-4, 1.0)])
    def test_preconditions(self, args):
        with pytest.raises(ConfigurationError):
            make_linear_schedule(*args)

    def test_timestep_range(self, full):
        with pytest.raises(DomainError):
            full.alpha_bar_at(0)
        with pytest.raises(DomainError):
            full.alpha_bar_at(1001)

    def test_params(self, full):
        assert full.params() == {"T": 1000, "beta_start": 1e-6, "beta_end": 1e-2}

    @settings(max_examples=40, deadline=None)
    @given(T=st.integers(2, 400), b0=st.floats(1e-7, 0.05), span=st.floats(0.0, 0.5))
    def test_recursion_property(self, T, b0, span):
        s = make_linear_schedule(T, b0, min(b0 + span, 0.9))
        np.testing.assert_allclose(s.alpha_bar[1:], s.alpha_bar[:-1] * s.alpha[1:], rtol=1e-12)
        assert np.all(np.diff(s.alpha_bar) < 0)


class TestForwardNoise:
    def test_zero_eps(self, full, rng):
        y0 = GridField(rng.standard_normal((8, 8)))
        out = forward_noise(y0, 300, GridField(np.zeros((8, 8))), full)
        assert np.array_equal(out.values, np.sqrt(full.alpha_bar[299]) * y0.values)

    def test_first_step_is_nearly_identity(self, full, rng):
        y0 = GridField(rng.standard_normal((8, 8)))
        eps = GridField(rng.standard_normal((8, 8)))
        out = forward_noise(y0, 1, eps, full)
        bound = np.sqrt(1e-6) * np.abs(eps.values).max() + 1e-6 * np.abs(y0.values).max()
        assert np.abs(out.values - y0.values).max() <= bound

    def test_monte_carlo_variance(self, full, rng):
        y0 = GridField(np.zeros((250, 400)))
        eps = GridField(rng.standard_normal((250, 400)))
        var = forward_noise(y0, 1000, eps, full).values.var()
        assert abs(var / (1 - full.alpha_bar[-1]) - 1) < 0.03

    def test_shape_mismatch(self, full):
        with pytest.raises(ShapeError):
            forward_noise(GridField(np.zeros((4, 4))), 1, GridField(np.zeros((4, 8))), full)

    def test_y0_coefficient_decreasing(self, full):
        y0 = GridField(np.ones((4, 4)))
        zero = GridField(np.zeros((4, 4)))
        coeffs = [forward_noise(y0, t, zero, full).values[0, 0] for t in (1, 10, 100, 1000)]
        assert all(a > b for a, b in zip(coeffs, coeffs[1:]))

    @settings(max_examples=30, deadline=None)
    @given(a=st.floats(-3, 3), b=st.floats(-3, 3), t=st.integers(1, 1000), seed=st.integers(0, 2**31))
    def test_joint_linearity(self, full, a, b, t, seed):
        r = np.random.default_rng(seed)
        y1, y2, e1, e2 = (r.standard_normal((4, 6)) for _ in range(4))
        f = lambda y, e: forward_noise(GridField(y), t, GridField(e), full).values
        np.testing.assert_allclose(f(a * y1 + b * y2, a * e1 + b * e2), a * f(y1, e1) + b * f(y2, e2),
                                   atol=1e-12)

    def test_batch_matches_single(self, full, rng):
        y0 = rng.standard_normal((3, 1, 8, 8))
        eps = rng.standard_normal((3, 1, 8, 8))
        t = torch.tensor([1, 500, 1000])
        out = noise_batch(torch.tensor(y0), t, torch.tensor(eps), full).numpy()
        for i, ti in enumerate(t.tolist()):
            ref = forward_noise(GridField(y0[i, 0]), ti, GridField(eps[i, 0]), full).values
            np.testing.assert_allclose(out[i, 0], ref, rtol=1e-12)

    def test_batch_range_check(self, full):
        with pytest.raises(DomainError):
            noise_batch(torch.zeros(1, 1, 4, 4), torch.tensor([0]), torch.zeros(1, 1, 4, 4), full)


def test_from_betas_allows_zero_beta():
    s = NoiseSchedule.from_betas([0.0, 0.1])
    assert s.alpha_at(1) == 1.0
    with pytest.raises(ConfigurationError):
        NoiseSchedule.from_betas([0.1, 1.0])
