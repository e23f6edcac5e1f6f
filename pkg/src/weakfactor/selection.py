"""Choosing the number of factors with GMM model-selection criteria.

For a candidate with ``k`` moments, ``q`` parameters and minimized
objective ``J`` the criteria are ``J - 2 (k - q)`` (AIC type) and
``J - (k - q) log n`` (BIC type).  The candidate with the smallest value is
chosen; ties go to the model with fewer factors.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import chi2

from .errors import InvalidParameterError
from .gmm import FitResult, ParamSpace, minimize_full
from .moments import MomentSystem, ZeroFactorModel, model_for

__all__ = ["ModelCriteria", "SelectionReport", "fit_zero_factor", "select_factors"]


@dataclass(frozen=True)
class ModelCriteria:
    factors: int
    qmin: float
    k: int
    q: int
    aic: float
    bic: float
    j_pvalue: float | None
    just_identified: bool


@dataclass(frozen=True)
class SelectionReport:
    models: tuple[ModelCriteria, ...]
    chosen_aic: int
    chosen_bic: int
    n: int

    def by_factors(self, m: int) -> ModelCriteria:
        for c in self.models:
            if c.factors == m:
                return c
        raise KeyError(m)


def fit_zero_factor(ms: MomentSystem) -> FitResult:
    """Closed-form GMM fit of a diagonal covariance matrix.

    The moments are linear in the variances, so the minimizer is a
    generalized least-squares projection.
    """
    model = ZeroFactorModel(ms.p)
    A = model.dvech_omega(np.ones(ms.p))
    wA = ms.whiten(A)
    wg = ms.whitened_base
    coef, *_ = np.linalg.lstsq(wA, wg, rcond=None)
    resid = wg - wA @ coef
    qmin = float(ms.n * resid @ resid)
    return FitResult(x=coef, qmin=qmin, converged=True, starts_used=0, gradient_norm=0.0, model=model)


def _default_candidates(p: int) -> tuple[int, ...]:
    return (0, 1) if p < 5 else (1, 2)


def select_factors(
    ms: MomentSystem,
    candidates=None,
    beta_min: float = 0.01,
    beta_max: float = 10.0,
    starts: int = 10,
    seed=0,
) -> SelectionReport:
    """Fit every candidate factor count and apply both criteria."""
    cands = tuple(sorted(set(candidates if candidates is not None else _default_candidates(ms.p))))
    if not cands or not set(cands) <= {0, 1, 2}:
        raise InvalidParameterError("candidates must be a nonempty subset of {0, 1, 2}")
    rows = []
    for m in cands:
        if m == 0:
            fit = fit_zero_factor(ms)
            model = fit.model
        else:
            model = model_for(ms.p, m)
            fit = minimize_full(ms, ParamSpace.default(model, beta_min, beta_max), starts=starts, seed=seed)
        dof = model.k - model.q
        if dof < 0:
            raise InvalidParameterError(f"{m}-factor model has more parameters than moments")
        rows.append(
            ModelCriteria(
                factors=m,
                qmin=fit.qmin,
                k=model.k,
                q=model.q,
                aic=fit.qmin - 2.0 * dof,
                bic=fit.qmin - dof * np.log(ms.n),
                j_pvalue=float(chi2.sf(fit.qmin, dof)) if dof > 0 else None,
                just_identified=dof == 0,
            )
        )
    chosen_aic = min(rows, key=lambda r: (r.aic, r.factors)).factors
    chosen_bic = min(rows, key=lambda r: (r.bic, r.factors)).factors
    return SelectionReport(models=tuple(rows), chosen_aic=chosen_aic, chosen_bic=chosen_bic, n=ms.n)
