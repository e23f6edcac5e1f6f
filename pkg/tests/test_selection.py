import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import minimize

from weakfactor.errors import InvalidParameterError
from weakfactor.harness import DgpSpec, simulate
from weakfactor.moments import VechIndex, vhat
from weakfactor.selection import fit_zero_factor, select_factors


def zero_factor_oracle(ms):
    """Numerical minimum of the GMM objective over diagonal covariances."""
    p = ms.p
    pairs = VechIndex(p).pairs()
    diag = [i for i, (a, b) in enumerate(pairs) if a == b]
    winv = np.linalg.inv(ms.vhat)
    g = ms.gbar_base

    def obj(d):
        r = g.copy()
        r[diag] -= d
        return ms.n * r @ winv @ r

    res = minimize(obj, g[diag], method="BFGS", options={"gtol": 1e-10})
    return res.fun, res.x


class TestZeroFactor:
    @pytest.mark.parametrize("variant, seed", [("1F-spec1", 0), ("1F-spec2", 1), ("2F-spec1", 2)])
    def test_closed_form_matches_optimizer(self, variant, seed):
        ms = vhat(simulate(DgpSpec(variant, b=2.0, b1=2.0), seed))
        fit = fit_zero_factor(ms)
        J, d = zero_factor_oracle(ms)
        assert fit.qmin == pytest.approx(J, rel=1e-6, abs=1e-6)
        np.testing.assert_allclose(fit.x, d, rtol=1e-5)

    def test_independent_data_small_j(self):
        ms = vhat(np.random.default_rng(0).standard_normal((2000, 3)))
        assert fit_zero_factor(ms).qmin < 20


class TestCriteria:
    def test_formulas_and_flags(self):
        ms = vhat(simulate(DgpSpec("1F-spec1", b=5.0), 0))
        rep = select_factors(ms)
        zero, one = rep.by_factors(0), rep.by_factors(1)
        assert (zero.k, zero.q, one.q) == (6, 3, 6)
        assert zero.aic == pytest.approx(zero.qmin - 6)
        assert zero.bic == pytest.approx(zero.qmin - 3 * np.log(500))
        assert one.just_identified and one.j_pvalue is None
        assert one.aic == one.bic == one.qmin
        assert not zero.just_identified and 0 <= zero.j_pvalue <= 1

    def test_default_candidates(self):
        assert [m.factors for m in select_factors(vhat(simulate(DgpSpec("1F-spec1"), 0))).models] == [0, 1]
        rep = select_factors(vhat(simulate(DgpSpec("2F-spec1", b1=5.0), 0)), starts=3)
        assert [m.factors for m in rep.models] == [1, 2]
        assert rep.by_factors(1).k - rep.by_factors(1).q == 5
        with pytest.raises(KeyError):
            rep.by_factors(0)

    @pytest.mark.parametrize("cands", [[], [3], [0, 5]])
    def test_candidate_validation(self, cands):
        with pytest.raises(InvalidParameterError):
            select_factors(vhat(simulate(DgpSpec("1F-spec1"), 0)), candidates=cands)

    def test_two_factors_need_five_variables(self):
        with pytest.raises(InvalidParameterError):
            select_factors(vhat(simulate(DgpSpec("1F-spec1"), 0)), candidates=[1, 2])

    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 10_000), b=st.floats(0.0, 20.0), spec=st.sampled_from(["1F-spec1", "1F-spec2"]))
    def test_bic_never_larger_than_aic(self, seed, b, spec):
        rep = select_factors(vhat(simulate(DgpSpec(spec, b=b), seed)), starts=3, seed=seed)
        assert rep.chosen_bic <= rep.chosen_aic
        assert rep.chosen_aic in (0, 1)


class TestFrequencies:
    def test_strong_single_factor(self):
        reps = [select_factors(vhat(simulate(DgpSpec("1F-spec1"), s)), starts=3, seed=s) for s in range(50)]
        assert all(r.chosen_aic == 1 and r.chosen_bic == 1 for r in reps)

    def test_weak_single_factor_bic(self):
        reps = [select_factors(vhat(simulate(DgpSpec("1F-spec2"), s)), starts=3, seed=s) for s in range(50)]
        assert np.mean([r.chosen_bic == 1 for r in reps]) <= 0.06
