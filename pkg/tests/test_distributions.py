import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import central_difference, gradient_error
from sepvae.distributions import (
    DiagGaussian,
    kl_monte_carlo_oracle,
    kl_to_isotropic,
    kl_to_standard_normal,
    sample_reparameterized,
)
from sepvae.errors import ContractViolation


def g(mean, log_var, dtype=torch.float64):
    return DiagGaussian(torch.tensor(mean, dtype=dtype), torch.tensor(log_var, dtype=dtype))


class TestDiagGaussian:
    def test_shape_mismatch(self):
        with pytest.raises(ContractViolation):
            DiagGaussian(torch.zeros(3), torch.zeros(2))

    def test_empty_dimension(self):
        with pytest.raises(ContractViolation):
            DiagGaussian(torch.zeros(0), torch.zeros(0))

    def test_variance_and_std(self):
        d = g([0.0, 1.0], [0.0, math.log(4.0)])
        assert torch.allclose(d.variance, torch.tensor([1.0, 4.0], dtype=torch.float64))
        assert torch.allclose(d.std, torch.tensor([1.0, 2.0], dtype=torch.float64))
        assert d.dim == 2

    def test_non_finite_rejected_by_kl(self):
        with pytest.raises(ContractViolation):
            kl_to_standard_normal(g([math.nan], [0.0]))
        with pytest.raises(ContractViolation):
            kl_to_isotropic(g([0.0], [math.inf]), 0.0, 1.0)


class TestSampling:
    def test_zero_noise_returns_mean(self):
        d = g([0.3, -1.2, 0.0], [5.0, -3.0, 0.7])
        assert torch.equal(sample_reparameterized(d, torch.zeros(3)), d.mean)

    def test_unit_std(self):
        assert sample_reparameterized(g([1.0], [0.0]), torch.tensor([2.0])).item() == 3.0

    def test_scaled(self):
        out = sample_reparameterized(g([0.5], [math.log(4.0)]), torch.tensor([-1.0]))
        assert out.item() == pytest.approx(-1.5, abs=1e-12)

    def test_noise_dimension_mismatch(self):
        with pytest.raises(ContractViolation):
            sample_reparameterized(g([0.0, 0.0], [0.0, 0.0]), torch.zeros(3))

    def test_sample_statistics(self):
        # mean within 4 standard errors, variance within 4 standard errors of N(mu, sigma^2)
        d = g([0.7, -2.0], [math.log(0.25), math.log(9.0)])
        n = 200_000
        gen = torch.Generator().manual_seed(0)
        noise = torch.randn(n, 2, generator=gen, dtype=torch.float64)
        z = sample_reparameterized(DiagGaussian(d.mean.expand(n, 2), d.log_variance.expand(n, 2)), noise)
        var = d.variance
        se_mean = (var / n).sqrt()
        assert ((z.mean(0) - d.mean).abs() < 4 * se_mean).all()
        se_var = var * math.sqrt(2.0 / (n - 1))
        assert ((z.var(0) - var).abs() < 4 * se_var).all()

    def test_differentiable(self):
        mean = torch.tensor([0.5], dtype=torch.float64, requires_grad=True)
        log_var = torch.tensor([0.2], dtype=torch.float64, requires_grad=True)
        out = sample_reparameterized(DiagGaussian(mean, log_var), torch.tensor([1.5]))
        out.sum().backward()
        assert mean.grad.item() == 1.0
        assert log_var.grad.item() == pytest.approx(0.5 * math.exp(0.1) * 1.5)


class TestClosedForms:
    @pytest.mark.parametrize("dim", [1, 3, 16])
    def test_standard_prior_is_zero(self, dim):
        assert kl_to_standard_normal(g([0.0] * dim, [0.0] * dim)).item() == 0.0

    def test_unit_shift(self):
        assert kl_to_standard_normal(g([1.0], [0.0])).item() == pytest.approx(0.5, abs=1e-15)

    def test_log_variance_one(self):
        assert kl_to_standard_normal(g([0.0], [1.0])).item() == pytest.approx(0.5 * (math.e - 2), abs=1e-15)

    def test_isotropic_example(self):
        d = g([0.1], [math.log(0.025)])
        assert kl_to_isotropic(d, 0.0, 0.025).item() == pytest.approx(0.2, abs=1e-12)

    def test_isotropic_equals_standard_at_unit_variance(self, rng):
        d = g(rng.normal(size=(5, 4)).tolist(), rng.normal(size=(5, 4)).tolist())
        assert torch.allclose(kl_to_isotropic(d, 0.0, 1.0), kl_to_standard_normal(d), atol=1e-13, rtol=0)

    def test_isotropic_identical_is_zero(self):
        d = g([0.3, -0.2], [math.log(0.4)] * 2)
        assert kl_to_isotropic(d, [0.3, -0.2], 0.4).item() == pytest.approx(0.0, abs=1e-14)

    def test_batched_sums_over_last_dim(self):
        d = g([[1.0, 0.0], [0.0, 0.0]], [[0.0, 1.0], [0.0, 0.0]])
        out = kl_to_standard_normal(d)
        assert out.shape == (2,)
        assert out[0].item() == pytest.approx(0.5 + 0.5 * (math.e - 2))
        assert out[1].item() == 0.0

    @pytest.mark.parametrize("pv", [0.0, -1.0, math.inf])
    def test_bad_prior_variance(self, pv):
        with pytest.raises(ContractViolation):
            kl_to_isotropic(g([0.0], [0.0]), 0.0, pv)

    def test_center_length_checked(self):
        with pytest.raises(ContractViolation):
            kl_to_isotropic(g([0.0, 0.0], [0.0, 0.0]), [0.0, 0.0, 0.0], 1.0)


finite = st.floats(-6, 6, allow_nan=False)


@st.composite
def gaussians(draw):
    dim = draw(st.integers(1, 8))
    mean = draw(st.lists(finite, min_size=dim, max_size=dim))
    log_var = draw(st.lists(finite, min_size=dim, max_size=dim))
    return g(mean, log_var)


class TestProperties:
    @given(gaussians())
    @settings(max_examples=200, deadline=None)
    def test_standard_kl_non_negative(self, d):
        assert kl_to_standard_normal(d).item() >= 0.0

    @given(gaussians(), st.floats(1e-3, 10.0), finite)
    @settings(max_examples=200, deadline=None)
    def test_isotropic_kl_non_negative(self, d, pv, center):
        assert kl_to_isotropic(d, center, pv).item() >= 0.0

    @given(st.floats(0.0, 5.0), st.floats(0.0, 5.0), st.floats(-3, 3))
    @settings(max_examples=100, deadline=None)
    def test_monotone_in_squared_mean(self, a, b, log_var):
        lo, hi = sorted([a, b])
        assert kl_to_standard_normal(g([lo], [log_var])).item() <= kl_to_standard_normal(g([hi], [log_var])).item()


class TestOracle:
    def test_unit_shift(self):
        est, se = kl_monte_carlo_oracle(g([1.0], [0.0]), 0.0, 1.0, 10**6, seed=0, return_stderr=True)
        assert est == pytest.approx(0.5, rel=1e-2)
        assert abs(est - 0.5) < 4 * se

    def test_log_variance_one(self):
        est = kl_monte_carlo_oracle(g([0.0], [1.0]), 0.0, 1.0, 10**6, seed=1)
        assert est == pytest.approx(0.5 * (math.e - 2), rel=1e-2)

    def test_isotropic_example(self):
        est = kl_monte_carlo_oracle(g([0.1], [math.log(0.025)]), 0.0, 0.025, 10**6, seed=2)
        assert est == pytest.approx(0.2, rel=1e-2)

    def test_identical_distributions(self):
        assert kl_monte_carlo_oracle(g([0.2, 0.1], [0.0, 0.0]), [0.2, 0.1], 1.0, 10**4, seed=3) == pytest.approx(0.0, abs=1e-12)

    def test_deterministic_given_seed(self):
        d = g([0.4, -0.3], [0.1, -0.5])
        assert kl_monte_carlo_oracle(d, 0.0, 0.5, 1000, seed=7) == kl_monte_carlo_oracle(d, 0.0, 0.5, 1000, seed=7)

    def test_eight_dim_random(self, rng):
        for _ in range(3):
            mean = rng.normal(0, 0.5, 8)
            log_var = rng.normal(0, 0.5, 8)
            d = g(mean.tolist(), log_var.tolist())
            closed = kl_to_isotropic(d, 0.0, 0.7).item()
            est = kl_monte_carlo_oracle(d, 0.0, 0.7, 10**6, seed=int(rng.integers(1 << 30)))
            assert abs(est - closed) <= max(1e-2 * abs(closed), 1e-3)

    def test_rejects_batched(self):
        with pytest.raises(ContractViolation):
            kl_monte_carlo_oracle(g([[0.0]], [[0.0]]), 0.0, 1.0, 10)

    def test_rejects_bad_sample_count(self):
        with pytest.raises(ContractViolation):
            kl_monte_carlo_oracle(g([0.0], [0.0]), 0.0, 1.0, 0)


class TestGradients:
    def _check(self, fn, dim=4, seed=0):
        gen = np.random.default_rng(seed)
        mean = torch.tensor(gen.normal(size=(3, dim)), requires_grad=True)
        log_var = torch.tensor(gen.normal(size=(3, dim)), requires_grad=True)
        f = lambda: fn(DiagGaussian(mean, log_var)).sum()  # noqa: E731
        f().backward()
        numeric = central_difference(f, [mean, log_var])
        assert gradient_error([mean.grad, log_var.grad], numeric) < 1e-4

    def test_standard_normal_gradient(self):
        self._check(kl_to_standard_normal)

    def test_isotropic_gradient(self):
        self._check(lambda d: kl_to_isotropic(d, 0.3, 0.025))

    def test_closed_form_gradient_values(self):
        # d/dmu = mu, d/dlogvar = (exp(logvar) - 1) / 2
        mean = torch.tensor([0.7], dtype=torch.float64, requires_grad=True)
        log_var = torch.tensor([0.4], dtype=torch.float64, requires_grad=True)
        kl_to_standard_normal(DiagGaussian(mean, log_var)).backward()
        assert mean.grad.item() == pytest.approx(0.7)
        assert log_var.grad.item() == pytest.approx(0.5 * (math.exp(0.4) - 1))
