"""Identification-robust test statistics and their critical values.

Weighting uses the Cholesky factor ``L`` of the moment variance instead of
the symmetric square root.  Any ``W`` with ``W'W = V^{-1}`` differs from the
symmetric root by an orthogonal rotation, and every statistic below is a
squared length of a projection, so the choice does not change any value.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy.stats import chi2

from .errors import DegenerateJTestError, InvalidParameterError
from .gmm import ParamSpace, minimize_full, minimize_null, profile_beta, q_n
from .moments import FactorModel, MomentSystem, _model_of

__all__ = [
    "TestOutcome",
    "chi2_quantile",
    "plugin_df",
    "ar_full",
    "k_stat",
    "rank_stat",
    "clr_statistic",
    "clr_critical_value",
    "clr_conditional",
    "clr_full",
    "j_test",
    "subvector_test",
    "METHODS",
]

METHODS = ("AR-Plug", "K-Plug", "CLR-Plug", "AR-Proj")
CLR_DRAWS = 10_000
CLR_SEED = 20240531
_RANK_RTOL = 1e-10


@dataclass(frozen=True)
class TestOutcome:
    """Result of one test.

    ``df`` holds the chi-square degrees of freedom where relevant and ``rk``
    the conditioning rank statistic for conditional tests.
    """

    __test__ = False  # not a pytest class

    statistic: float
    critical_value: float
    reject: bool
    alpha: float
    method: str
    df: float | None = None
    rk: float | None = None
    warnings: tuple[str, ...] = ()
    details: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        if not 0 < self.alpha < 1:
            raise InvalidParameterError("alpha must lie in (0, 1)")
        object.__setattr__(self, "statistic", float(self.statistic))
        object.__setattr__(self, "critical_value", float(self.critical_value))
        object.__setattr__(self, "reject", bool(self.reject))
        if self.reject != (self.statistic > self.critical_value):
            raise InvalidParameterError("reject flag must equal statistic > critical_value")

    @property
    def pvalue(self) -> float | None:
        if self.df is None or self.method.startswith("CLR"):
            return None
        return float(chi2.sf(self.statistic, self.df))


def chi2_quantile(prob: float, df: float) -> float:
    return float(chi2.ppf(prob, df))


def plugin_df(k: int, q: int, approach: str, method: str) -> dict:
    """Degrees-of-freedom bookkeeping for subvector tests.

    AR-type statistics use ``k`` minus the number of plugged-in nuisance
    coordinates.  With approach A every coordinate except the tested one is
    plugged in (``q - 1``).  With approach B ``beta`` is projected out as
    well (``q - 2``).  Projection plugs in nothing.  The K statistic has one
    degree of freedom per tested coordinate and the second CLR component
    ``k - q`` (the overidentifying restrictions).
    """
    if approach not in ("A", "B"):
        raise InvalidParameterError(f"unknown approach {approach!r}")
    tested = 1 if approach == "A" else 2
    plugged = q - tested
    if method == "AR-Plug":
        return {"df": k - plugged}
    if method == "AR-Proj":
        return {"df": k}
    if method == "K-Plug":
        return {"df": tested}
    if method == "CLR-Plug":
        return {"df1": tested, "df2": k - q}
    raise InvalidParameterError(f"unknown method {method!r}")


def ar_full(theta0, ms: MomentSystem, alpha: float = 0.05) -> TestOutcome:
    """Full-vector AR test: ``Q(theta0)`` against ``chi2(k)``."""
    stat = q_n(theta0, ms)
    cv = chi2_quantile(1 - alpha, ms.k)
    return TestOutcome(stat, cv, stat > cv, alpha, "AR", df=ms.k)


def _weighted(ms: MomentSystem, theta0, D=None):
    model = _model_of(theta0)
    if D is None:
        D = -model.dvech_omega(theta0)
    g = ms.gbar_base - model.vech_omega(theta0)
    return np.sqrt(ms.n) * ms.whiten(g), np.sqrt(ms.n) * ms.whiten(D)


def _project(a: np.ndarray, basis: np.ndarray) -> tuple[np.ndarray, int]:
    """Projection of ``a`` onto the column span of ``basis`` and its rank."""
    if basis.size == 0:
        return np.zeros_like(a), 0
    u, s, _ = np.linalg.svd(basis, full_matrices=False)
    tol = _RANK_RTOL * (s[0] if s.size else 0.0) * max(basis.shape)
    rank = int(np.sum(s > tol)) if s.size and s[0] > 0 else 0
    u = u[:, :rank]
    return u @ (u.T @ a), rank


def k_components(wg: np.ndarray, wD: np.ndarray) -> tuple[float, int]:
    """K from whitened, ``sqrt(n)``-scaled moments and Jacobian."""
    proj, rank = _project(wg, wD)
    return float(proj @ proj), rank


def k_stat(theta0, ms: MomentSystem, D=None) -> tuple[float, int]:
    """K statistic at ``theta0`` and the realized rank of the weighted Jacobian.

    ``D`` defaults to the full theta Jacobian.  If it is rank deficient the
    projection is onto the realized column space.
    """
    wg, wD = _weighted(ms, theta0, D)
    return k_components(wg, wD)


def rank_components(wd: np.ndarray, wDnu: np.ndarray) -> float:
    proj, _ = _project(wd, wDnu)
    resid = wd - proj
    return float(resid @ resid)


def rank_stat(d, Dnu, ms: MomentSystem) -> float:
    """``n`` times the squared length of the weighted tested column after
    projecting off the weighted nuisance columns."""
    d = np.asarray(d, dtype=float)
    Dnu = np.asarray(Dnu, dtype=float).reshape(ms.k, -1)
    s = np.sqrt(ms.n)
    return rank_components(s * ms.whiten(d), s * ms.whiten(Dnu))


def clr_statistic(Q: float, K: float, rk: float) -> float:
    J = Q - K
    disc = (Q + rk) ** 2 - 4.0 * J * rk
    return 0.5 * (Q - rk + np.sqrt(max(disc, 0.0)))


@lru_cache(maxsize=32)
def _clr_draws(df1: int, df2: int, draws: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(seed)
    y1 = rng.chisquare(df1, draws)
    y2 = rng.chisquare(df2, draws) if df2 > 0 else np.zeros(draws)
    y1.setflags(write=False)
    y2.setflags(write=False)
    return y1, y2


def clr_critical_value(
    rk: float,
    df1: int,
    df2: int,
    alpha: float = 0.05,
    draws: int = CLR_DRAWS,
    seed: int = CLR_SEED,
) -> float:
    """Simulated ``1 - alpha`` quantile of the conditional CLR law given ``rk``.

    The same draws are reused for every ``rk`` so the critical value is a
    monotone function of ``rk`` up to rounding of order ``rk * eps``.
    """
    if rk < 0:
        raise InvalidParameterError("rk must be nonnegative")
    y1, y2 = _clr_draws(int(df1), int(df2), int(draws), int(seed))
    s = y1 + y2
    disc = np.maximum((s + rk) ** 2 - 4.0 * y2 * rk, 0.0)
    vals = np.sort(0.5 * (s - rk + np.sqrt(disc)))
    idx = int(np.ceil((1 - alpha) * draws)) - 1
    return float(vals[idx])


def clr_conditional(
    Q: float,
    K: float,
    rk: float,
    df1: int,
    df2: int,
    alpha: float = 0.05,
    draws: int = CLR_DRAWS,
    seed: int = CLR_SEED,
    method: str = "CLR",
) -> TestOutcome:
    stat = clr_statistic(Q, K, rk)
    cv = clr_critical_value(rk, df1, df2, alpha, draws, seed)
    return TestOutcome(stat, cv, stat > cv, alpha, method, df=df1, rk=rk)


def clr_full(theta0, ms: MomentSystem, alpha: float = 0.05, draws: int = CLR_DRAWS, seed: int = CLR_SEED) -> TestOutcome:
    """Full-vector CLR test with ``rk`` the smallest eigenvalue of ``n D'V^{-1}D``."""
    wg, wD = _weighted(ms, theta0)
    Q = float(wg @ wg)
    K, _ = k_components(wg, wD)
    rk = float(np.linalg.eigvalsh(wD.T @ wD)[0])
    q = wD.shape[1]
    return clr_conditional(Q, K, max(rk, 0.0), q, ms.k - q, alpha, draws, seed)


def j_test(ms: MomentSystem, space: ParamSpace, alpha: float = 0.05, starts: int = 10, seed=0) -> TestOutcome:
    """Overidentification test of the model in ``space``."""
    model: FactorModel = space.model
    dof = model.k - model.q
    if dof <= 0:
        raise DegenerateJTestError(f"model is just identified (k = q = {model.q})")
    fit = minimize_full(ms, space, starts=starts, seed=seed)
    cv = chi2_quantile(1 - alpha, dof)
    return TestOutcome(
        fit.qmin, cv, fit.qmin > cv, alpha, "J", df=dof, details={"fit": fit}
    )


def subvector_test(
    method: str,
    hyp,
    r0: float,
    ms: MomentSystem,
    space: ParamSpace,
    alpha: float = 0.05,
    clr_draws: int = CLR_DRAWS,
    clr_seed: int = CLR_SEED,
) -> TestOutcome:
    """Plug-in or projected test of ``r(theta) = r0``.

    With approach A the nuisance block is fitted with ``r`` pinned.  With
    approach B ``beta`` is profiled out jointly with the nuisance block;
    only AR-type statistics are available in that case.
    """
    if method not in METHODS:
        raise InvalidParameterError(f"unknown method {method!r}; choose from {METHODS}")
    model = space.model
    k, q = model.k, model.q
    dfs = plugin_df(k, q, hyp.approach, method)
    if hyp.approach == "B":
        if method in ("K-Plug", "CLR-Plug"):
            raise InvalidParameterError(
                f"{method} is only available when the restriction can be solved for beta"
            )
        fit = profile_beta(ms, space, hyp, r0)
    else:
        fit = minimize_null(ms, space, hyp, r0)
    details = {"fit": fit}
    Q = fit.qmin
    if method in ("AR-Plug", "AR-Proj"):
        cv = chi2_quantile(1 - alpha, dfs["df"])
        return TestOutcome(Q, cv, Q > cv, alpha, method, df=dfs["df"], details=details)

    x = fit.x
    D = -model.dvech_omega(x)
    bi = model.beta_index
    dr = np.asarray(hyp.r_grad(x), dtype=float)
    dr_beta = dr[bi]
    nuis = np.array([i for i in range(q) if i != bi])
    d_tested = D[:, bi] / dr_beta
    D_nuis = D[:, nuis] - np.outer(D[:, bi], dr[nuis] / dr_beta)
    s = np.sqrt(ms.n)
    wg = s * ms.whiten(ms.gbar_base - model.vech_omega(x))
    wd = s * ms.whiten(d_tested)
    wDn = s * ms.whiten(D_nuis)
    K, rank = k_components(wg, np.column_stack([wDn, wd]))
    details["jacobian_rank"] = rank
    if method == "K-Plug":
        cv = chi2_quantile(1 - alpha, dfs["df"])
        return TestOutcome(K, cv, K > cv, alpha, method, df=dfs["df"], details=details)
    rk = rank_components(wd, wDn)
    out = clr_conditional(Q, K, rk, dfs["df1"], dfs["df2"], alpha, clr_draws, clr_seed, method)
    return TestOutcome(
        out.statistic, out.critical_value, out.reject, alpha, method, df=dfs["df1"], rk=rk,
        details=details | {"Q": Q, "K": K},
    )
