import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from weakfactor.errors import InfeasibleNullError, InvalidParameterError
from weakfactor.gmm import ParamSpace, minimize_full, minimize_null, profile_beta, q_n
from weakfactor.harness import DgpSpec, simulate
from weakfactor.hypotheses import registry
from weakfactor.model_core import OneFactorParams, OneFactorTheta, TwoFactorParams, omega_of_gamma, reparam_1f, reparam_2f
from weakfactor.moments import MomentSystem, VechIndex, model_for, vhat


def exact_system(theta, model, n=500, seed=0):
    """Moment system whose sample moments equal the model image at ``theta``."""
    data = np.random.default_rng(seed).standard_normal((n, model.p))
    ms = vhat(data)
    return MomentSystem(n, model.vech_omega(theta), ms.vhat, ms.vech_index)


def one_factor_draw(b, seed, n=500):
    return vhat(simulate(DgpSpec("1F-spec1", n=n, b=b), seed))


class TestObjective:
    def test_zero_at_exact_fit(self):
        model = model_for(3, 1)
        th = OneFactorTheta(rho=[1, 0.5], omega=[2, 2, 2], beta=1)
        assert q_n(th, exact_system(th, model)) == 0.0

    def test_depends_on_summary_only(self):
        data = np.random.default_rng(1).standard_normal((300, 3))
        a = vhat(data)
        b = vhat(data[::-1])
        th = OneFactorTheta(rho=[0.1, 0.2], omega=[1, 1, 1], beta=1)
        assert q_n(th, a) == pytest.approx(q_n(th, b), rel=1e-12)

    @staticmethod
    def _normal_theory_variance(omega):
        pairs = VechIndex(omega.shape[0]).pairs()
        return np.array(
            [[omega[a, c] * omega[b, d] + omega[a, d] * omega[b, c] for c, d in pairs] for a, b in pairs]
        )

    def test_chi_square_mean_with_exact_variance(self):
        # the exact Gaussian moment variance isolates the moment map from weight estimation
        rng = np.random.default_rng(2)
        g = OneFactorParams(lam=[1, 1, 1], sigma2=1, phi=[1, 1, 1])
        om = omega_of_gamma(g)
        vo = model_for(3, 1).vech_omega(reparam_1f(g))
        vinv = np.linalg.inv(self._normal_theory_variance(om))
        chol = np.linalg.cholesky(om)
        qs = []
        for _ in range(2000):
            gb = vhat(rng.standard_normal((500, 3)) @ chol.T).gbar_base - vo
            qs.append(500 * gb @ vinv @ gb)
        qs = np.array(qs)
        assert abs(qs.mean() - 6) < 3 * qs.std(ddof=1) / np.sqrt(qs.size)

    def test_chi_square_mean_with_estimated_variance(self):
        # the fourth-moment weight estimate needs a large sample for chi-square calibration
        rng = np.random.default_rng(2)
        g = OneFactorParams(lam=[1, 1, 1], sigma2=1, phi=[1, 1, 1])
        th = reparam_1f(g)
        chol = np.linalg.cholesky(omega_of_gamma(g))
        qs = np.array([q_n(th, vhat(rng.standard_normal((20_000, 3)) @ chol.T)) for _ in range(2000)])
        assert abs(qs.mean() - 6) < 3 * qs.std(ddof=1) / np.sqrt(qs.size)


class TestFullFit:
    def test_exact_image_interpolated(self):
        model = model_for(3, 1)
        th = OneFactorTheta(rho=[1.2, 0.7], omega=[2.5, 2.3, 1.9], beta=1.3)
        fit = minimize_full(exact_system(th, model), ParamSpace.default(model))
        assert fit.qmin < 1e-8
        np.testing.assert_allclose(fit.x, th.to_vector(), atol=1e-5)

    def test_two_factor_exact_image(self):
        lam = np.vstack([np.eye(2), [[1, 0.6], [0.8, -0.4], [0.3, 1.1]]])
        th = reparam_2f(TwoFactorParams(lam=lam, sigma=[[1.2, 0.3], [0.3, 0.9]], phi=np.ones(5)))
        model = model_for(5, 2)
        fit = minimize_full(exact_system(th, model), ParamSpace.default(model))
        assert fit.qmin < 1e-8

    def test_consistency_under_strong_identification(self):
        model = model_for(3, 1)
        space = ParamSpace.default(model)
        est = np.array([minimize_full(one_factor_draw(10.0, s), space, starts=3, seed=s).x[-1] for s in range(200)])
        # the DGP has sigma^2 = 1 and sqrt(n) rho_2 rho_3 = 10
        se = est.std(ddof=1) / np.sqrt(est.size)
        assert abs(est.mean() - 1.0) < 3 * max(se, 0.01)

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_start_count_does_not_change_minimum(self, seed):
        ms = vhat(simulate(DgpSpec("1F-spec1", n=500, b=50.0), seed))
        space = ParamSpace.default(model_for(3, 1))
        a = minimize_full(ms, space, starts=1, seed=seed)
        b = minimize_full(ms, space, starts=20, seed=seed)
        assert abs(a.qmin - b.qmin) < 1e-6

    def test_seeded_determinism(self):
        ms = vhat(simulate(DgpSpec("2F-spec1", b1=5.0), 4))
        space = ParamSpace.default(model_for(5, 2))
        a = minimize_full(ms, space, starts=5, seed=11)
        b = minimize_full(ms, space, starts=5, seed=11)
        assert a.qmin == b.qmin
        assert np.array_equal(a.x, b.x)

    @pytest.mark.parametrize("c", [0.1, 7.0])
    def test_scale_equivariance(self, c):
        # beta scales with c^2, so the box must not bind
        data = simulate(DgpSpec("2F-spec1", b1=10.0), 5)
        space = ParamSpace.default(model_for(5, 2), 1e-8, 1e8)
        a = minimize_full(vhat(data), space, starts=5, seed=0)
        b = minimize_full(vhat(c * data), space, starts=5, seed=0)
        assert abs(a.qmin - b.qmin) < 1e-8 * max(1.0, a.qmin)

    def test_dimension_mismatch(self):
        ms = vhat(np.random.default_rng(0).standard_normal((100, 4)))
        with pytest.raises(InvalidParameterError):
            minimize_full(ms, ParamSpace.default(model_for(3, 1)))


class TestNullFit:
    def test_exact_null_fit(self):
        model = model_for(3, 1)
        th = OneFactorTheta(rho=[1.5, 0.9], omega=[3, 3, 3], beta=1.5)
        ms = exact_system(th, model)
        fit = minimize_null(ms, ParamSpace.default(model), registry(1, 3, "FV"), 1.5)
        assert fit.qmin < 1e-8
        assert fit.x[-1] == 1.5

    @pytest.mark.parametrize("r0", [12.0, 0.001])
    def test_beta_outside_box(self, r0):
        model = model_for(3, 1)
        ms = one_factor_draw(0.0, 0)
        with pytest.raises(InfeasibleNullError):
            minimize_null(ms, ParamSpace.default(model), registry(1, 3, "FV"), r0)

    def test_profiled_loading_null_exact(self):
        model = model_for(3, 1)
        th = OneFactorTheta(rho=[1.4, 0.7], omega=[3, 3, 3], beta=1.4)
        ms = exact_system(th, model)
        hyp = registry(1, 3, "FL3", assume=False)
        assert hyp.approach == "B"
        fit = profile_beta(ms, ParamSpace.default(model), hyp, 0.5)
        assert fit.qmin < 1e-8

    @pytest.mark.parametrize("seed", [0, 1])
    def test_profile_matches_beta_grid(self, seed):
        model = model_for(3, 1)
        space = ParamSpace.default(model)
        ms = one_factor_draw(5.0, seed)
        hyp = registry(1, 3, "FL2", assume=False)
        prof = profile_beta(ms, space, hyp, 0.9)

        def pinned(grid):
            return np.array([minimize_null(ms, space, hyp, 0.9, beta0=b).qmin for b in grid])

        coarse = np.geomspace(space.beta_min, space.beta_max, 200)
        qc = pinned(coarse)
        i = int(np.argmin(qc))
        fine = np.linspace(coarse[max(i - 1, 0)], coarse[min(i + 1, coarse.size - 1)], 200)
        best = min(qc.min(), pinned(fine).min())
        assert prof.qmin <= best + 1e-8
        assert best - prof.qmin < 1e-4

    @settings(max_examples=15, deadline=None)
    @given(seed=st.integers(0, 10_000), r0=st.floats(0.2, 5.0))
    def test_monotone_minima(self, seed, r0):
        model = model_for(3, 1)
        space = ParamSpace.default(model)
        ms = one_factor_draw(3.0, seed)
        hyp = registry(1, 3, "FL2", assume=False)
        full = minimize_full(ms, space, starts=10, seed=seed)
        prof = profile_beta(ms, space, hyp, r0)
        pinned = minimize_null(ms, space, hyp, r0, beta0=1.0)
        assert full.qmin <= prof.qmin + 1e-7
        assert prof.qmin <= pinned.qmin + 1e-7

    def test_profile_requires_approach_b(self):
        model = model_for(3, 1)
        with pytest.raises(InvalidParameterError):
            profile_beta(one_factor_draw(0.0, 0), ParamSpace.default(model), registry(1, 3, "FV"), 1.0)
