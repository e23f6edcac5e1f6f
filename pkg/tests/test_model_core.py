import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import least_squares

from weakfactor.errors import DomainError, InvalidParameterError, SingularInversionError
from weakfactor.model_core import (
    OneFactorParams,
    OneFactorTheta,
    TwoFactorParams,
    TwoFactorTheta,
    id_strength_1f,
    id_strength_2f,
    invert_1f,
    invert_2f,
    omega_of_gamma,
    reparam_1f,
    reparam_2f,
    theta_from_vector,
)

from _gen import (
    omega_oracle,
    random_gamma_1f,
    random_gamma_2f,
    theta_1f_oracle,
    theta_vector_oracle,
)

seeds = st.integers(0, 2**32 - 1)


def _two_factor(rows, sigma=None, phi=None):
    lam = np.vstack([np.eye(2), rows])
    p = lam.shape[0]
    return TwoFactorParams(
        lam=lam,
        sigma=np.eye(2) if sigma is None else sigma,
        phi=np.ones(p) if phi is None else phi,
    )


class TestOmegaOfGamma:
    def test_one_factor_unit_loadings(self):
        g = OneFactorParams(lam=[1, 1, 1], sigma2=1, phi=[1, 1, 1])
        np.testing.assert_array_equal(omega_of_gamma(g), [[2, 1, 1], [1, 2, 1], [1, 1, 2]])

    def test_zero_loading_kills_off_diagonals(self):
        g = OneFactorParams(lam=[1, 0.7, 0.0], sigma2=1.3, phi=[1, 1, 1])
        om = omega_of_gamma(g)
        assert om[2, 0] == 0 and om[2, 1] == 0

    def test_two_factor_example(self):
        om = omega_of_gamma(_two_factor([(1, 1), (1, 0), (0, 1)]))
        assert om[2, 4] == 1 and om[3, 4] == 0 and om[2, 3] == 1

    @pytest.mark.parametrize("p", [5, 6, 7])
    def test_matches_termwise_sum(self, p):
        rng = np.random.default_rng(p)
        for _ in range(50):
            g = random_gamma_2f(rng, p)
            np.testing.assert_allclose(omega_of_gamma(g), omega_oracle(g.lam, g.sigma, g.phi), atol=1e-12)


class TestParamValidation:
    def test_first_loading_normalized(self):
        with pytest.raises(InvalidParameterError):
            OneFactorParams(lam=[2, 1, 1], sigma2=1, phi=[1, 1, 1])

    def test_one_factor_needs_three_variables(self):
        with pytest.raises(InvalidParameterError):
            OneFactorParams(lam=[1, 1], sigma2=1, phi=[1, 1])

    def test_two_factor_top_block(self):
        lam = np.vstack([[[1, 0.5], [0, 1]], np.ones((3, 2))])
        with pytest.raises(InvalidParameterError):
            TwoFactorParams(lam=lam, sigma=np.eye(2), phi=np.ones(5))

    def test_two_factor_needs_five_variables(self):
        with pytest.raises(InvalidParameterError):
            TwoFactorParams(lam=np.vstack([np.eye(2), [[1, 1], [1, 0]]]), sigma=np.eye(2), phi=np.ones(4))

    def test_asymmetric_sigma(self):
        with pytest.raises(InvalidParameterError):
            _two_factor([(1, 1), (1, 0), (0, 1)], sigma=[[1, 0.2], [0.1, 1]])

    def test_theta_vector_length_checked(self):
        with pytest.raises(InvalidParameterError):
            theta_from_vector(np.ones(5), 3, 1)


class TestOneFactorReparam:
    @pytest.mark.parametrize(
        "lam, s2, rho, omega, beta",
        [
            ([1, 1, 0], 1, [1, 0], [2, 2, 1], 1),
            ([1, 1, 1], 2, [2, 2], [3, 3, 3], 2),
        ],
    )
    def test_substitution(self, lam, s2, rho, omega, beta):
        th = reparam_1f(OneFactorParams(lam=lam, sigma2=s2, phi=[1, 1, 1]))
        np.testing.assert_allclose(th.rho, rho)
        np.testing.assert_allclose(th.omega, omega)
        assert th.beta == beta

    def test_closed_form_inverse(self):
        g, ok = invert_1f(OneFactorTheta(rho=[2, 1], omega=[3, 5, 2], beta=2))
        assert ok
        np.testing.assert_allclose(g.lam, [1, 1, 0.5])
        assert g.sigma2 == 2
        np.testing.assert_allclose(g.phi, [1, 3, 1.5])

    def test_boundary_zero_loadings(self):
        g, ok = invert_1f(OneFactorTheta(rho=[0, 0], omega=[1, 1, 1], beta=1))
        assert ok
        np.testing.assert_array_equal(g.lam, [1, 0, 0])
        np.testing.assert_array_equal(g.phi, [0, 1, 1])

    def test_negative_implied_variance_flagged(self):
        _, ok = invert_1f(OneFactorTheta(rho=[1, 1], omega=[0.5, 3, 3], beta=1))
        assert not ok

    @pytest.mark.parametrize("beta", [0.0, -1.0])
    def test_nonpositive_beta(self, beta):
        with pytest.raises(DomainError):
            invert_1f(OneFactorTheta(rho=[1, 1], omega=[2, 2, 2], beta=beta))

    @pytest.mark.parametrize("p", [3, 4, 6])
    def test_matches_covariance_readoff(self, p):
        rng = np.random.default_rng(10 + p)
        for _ in range(50):
            g = random_gamma_1f(rng, p)
            np.testing.assert_allclose(reparam_1f(g).to_vector(), theta_1f_oracle(g), atol=1e-12)

    @settings(max_examples=200, deadline=None)
    @given(seed=seeds, p=st.integers(3, 7))
    def test_roundtrip_gamma(self, seed, p):
        g = random_gamma_1f(np.random.default_rng(seed), p)
        back, ok = invert_1f(reparam_1f(g))
        assert ok
        np.testing.assert_allclose(back.lam, g.lam, atol=1e-10)
        np.testing.assert_allclose(back.phi, g.phi, atol=1e-10)
        assert abs(back.sigma2 - g.sigma2) < 1e-10

    @settings(max_examples=200, deadline=None)
    @given(seed=seeds)
    def test_roundtrip_theta(self, seed):
        rng = np.random.default_rng(seed)
        th = OneFactorTheta(rho=rng.uniform(-2, 2, 2), omega=rng.uniform(5, 9, 3), beta=rng.uniform(1, 3))
        g, ok = invert_1f(th)
        assert ok
        np.testing.assert_allclose(reparam_1f(g).to_vector(), th.to_vector(), atol=1e-10)


class TestTwoFactorReparam:
    def test_identity_sigma_readoff(self):
        th = reparam_2f(_two_factor([(1, 1), (1, 0), (0, 1)]))
        assert (th.rho(3, 1), th.rho(3, 2), th.rho(4, 1), th.rho(4, 2)) == (1, 1, 1, 0)
        assert (th.chi, th.sigma12, th.beta) == (1, 0, 1)

    def test_sigma_column_readoff(self):
        th = reparam_2f(_two_factor([(1, 0), (1, 1), (0, 1)], sigma=np.array([[2, 0.5], [0.5, 1]])))
        assert th.rho(3, 1) == 2 and th.rho(3, 2) == 0.5

    def test_inverse_on_identity_image(self):
        th = TwoFactorTheta(rho1=[1, 1, 0], rho2=[1, 0, 1], omega=[2, 2, 3, 2, 2], chi=1, sigma12=0, beta=1)
        g, ok = invert_2f(th)
        assert ok
        np.testing.assert_allclose(g.lam[2:], [[1, 1], [1, 0], [0, 1]], atol=1e-14)
        np.testing.assert_allclose(g.sigma, np.eye(2), atol=1e-14)

    @pytest.mark.parametrize("p", [5, 6, 7])
    def test_matches_covariance_readoff(self, p):
        rng = np.random.default_rng(20 + p)
        for _ in range(50):
            g = random_gamma_2f(rng, p)
            om = omega_oracle(g.lam, g.sigma, g.phi)
            np.testing.assert_allclose(reparam_2f(g).to_vector(), theta_vector_oracle(om, g.sigma[1, 1]), atol=1e-12)

    @settings(max_examples=300, deadline=None)
    @given(seed=seeds, p=st.integers(5, 7))
    def test_roundtrip_gamma(self, seed, p):
        g = random_gamma_2f(np.random.default_rng(seed), p)
        back, ok = invert_2f(reparam_2f(g))
        assert ok
        np.testing.assert_allclose(back.lam, g.lam, atol=1e-9, rtol=1e-9)
        np.testing.assert_allclose(back.sigma, g.sigma, atol=1e-9, rtol=1e-9)
        np.testing.assert_allclose(back.phi, g.phi, atol=1e-9, rtol=1e-9)

    @settings(max_examples=200, deadline=None)
    @given(seed=seeds)
    def test_roundtrip_theta(self, seed):
        th = reparam_2f(random_gamma_2f(np.random.default_rng(seed), 6))
        g, _ = invert_2f(th)
        np.testing.assert_allclose(reparam_2f(g).to_vector(), th.to_vector(), atol=1e-9, rtol=1e-9)

    @pytest.mark.parametrize("seed", range(10))
    def test_inverse_agrees_with_root_finding(self, seed):
        # solve theta(gamma) = theta0 numerically with the covariance read-off map
        rng = np.random.default_rng(seed)
        p = 6
        g0 = random_gamma_2f(rng, p)
        target = theta_vector_oracle(omega_oracle(g0.lam, g0.sigma, g0.phi), g0.sigma[1, 1])

        def unpack(z):
            lam = np.vstack([np.eye(2), z[: 2 * (p - 2)].reshape(p - 2, 2)])
            s = z[2 * (p - 2) : 2 * (p - 2) + 3]
            sigma = np.array([[s[0], s[1]], [s[1], s[2]]])
            return lam, sigma, z[-p:]

        def resid(z):
            lam, sigma, phi = unpack(z)
            return theta_vector_oracle(omega_oracle(lam, sigma, phi), sigma[1, 1]) - target

        z0 = np.concatenate([g0.lam[2:].ravel(), [g0.sigma[0, 0], g0.sigma[0, 1], g0.sigma[1, 1]], g0.phi])
        z0 = z0 + 0.05 * rng.standard_normal(z0.size)
        sol = least_squares(resid, z0, xtol=1e-15, ftol=1e-15, gtol=1e-15)
        lam, sigma, phi = unpack(sol.x)
        g, _ = invert_2f(TwoFactorTheta.from_vector(target, p))
        np.testing.assert_allclose(g.lam, lam, atol=1e-8)
        np.testing.assert_allclose(g.sigma, sigma, atol=1e-8)
        np.testing.assert_allclose(g.phi, phi, atol=1e-8)

    def test_singular_denominator(self):
        # beta rho_41 - sigma12 rho_42 = 0
        th = TwoFactorTheta(rho1=[1, 0, 0], rho2=[1, 0, 1], omega=np.full(5, 3.0), chi=1, sigma12=0, beta=1)
        with pytest.raises(SingularInversionError):
            invert_2f(th)

    @pytest.mark.parametrize("seed", range(5))
    def test_denominator_identities(self, seed):
        g = random_gamma_2f(np.random.default_rng(seed), 5)
        th = reparam_2f(g)
        det = np.linalg.det(g.sigma)
        a4 = th.beta * th.rho(4, 1) - th.sigma12 * th.rho(4, 2)
        a3 = th.beta * th.rho(3, 1) - th.sigma12 * th.rho(3, 2)
        assert abs(a4 - det * g.lam[3, 0]) < 1e-12
        assert abs(a3 - det * g.lam[2, 0]) < 1e-12

    def test_nonpositive_beta(self):
        th = reparam_2f(random_gamma_2f(np.random.default_rng(0), 5))
        bad = TwoFactorTheta(th.rho1, th.rho2, th.omega, th.chi, th.sigma12, -0.5)
        with pytest.raises(DomainError):
            invert_2f(bad)


class TestIdStrength:
    def test_one_factor_zero_product(self):
        th = OneFactorTheta(rho=[1, 0], omega=[2, 2, 1], beta=1)
        np.testing.assert_array_equal(id_strength_1f(th, 100).s, [0])

    def test_one_factor_pair_order(self):
        th = OneFactorTheta(rho=[1, 2, 3], omega=np.full(4, 20.0), beta=1)
        np.testing.assert_array_equal(id_strength_1f(th, 100).s, [2, 3, 6])

    @pytest.mark.parametrize("b", [0.0, 2.0, 10.0])
    def test_table_drift_scaling(self, b):
        n = 500
        th = reparam_1f(OneFactorParams(lam=[1, 1, b / np.sqrt(n)], sigma2=1, phi=[1, 1, 1]))
        assert abs(id_strength_1f(th, n).scaled[0] - b) < 1e-10

    def test_two_factor_example(self):
        th = TwoFactorTheta(rho1=[1, 1, 0], rho2=[1, 0, 1], omega=np.full(5, 3.0), chi=1, sigma12=0, beta=1)
        np.testing.assert_allclose(id_strength_2f(th, 1).s, [1, 0])

    def test_two_factor_collinear_rows(self):
        th = TwoFactorTheta(
            rho1=[1, 2, 3, -1], rho2=[0.5, 1, 1.5, -0.5], omega=np.full(6, 9.0), chi=1, sigma12=0.2, beta=1
        )
        np.testing.assert_allclose(id_strength_2f(th, 1).s, 0, atol=1e-15)

    def test_two_factor_ordering(self):
        th = reparam_2f(random_gamma_2f(np.random.default_rng(3), 7))
        s = id_strength_2f(th, 1).s
        # s1 (p-4), s2 (p-4), s3 ((p-4)(p-5)/2)
        assert s.size == 3 + 3 + 3

    @settings(max_examples=200, deadline=None)
    @given(seed=seeds, zeros=st.integers(0, 3))
    def test_one_factor_identification_equivalence(self, seed, zeros):
        rng = np.random.default_rng(seed)
        lam = np.concatenate([[1.0], rng.uniform(0.3, 2, 3)])
        lam[1 : 1 + zeros] = 0.0
        g = OneFactorParams(lam=lam, sigma2=1.0, phi=np.ones(4))
        s = id_strength_1f(reparam_1f(g), 1).s
        at_most_one = np.count_nonzero(g.lam[1:]) <= 1
        assert bool(np.all(s == 0)) == at_most_one
