"""GMM objective and its minimization over boxes of theta coordinates.

The objective is ``Q(theta) = n gbar' V^{-1} gbar``.  With ``V = L L'`` it
equals the squared norm of the residual ``sqrt(n) L^{-1} gbar(theta)``,
which is minimized with a bounded trust-region least-squares solver using
the analytic Jacobian of the moments.

Null-restricted fits are expressed through :class:`Coordinates`, which maps
a vector of free coordinates into a full theta, optionally with one
coordinate solved from the restriction as a function of the others.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.optimize import least_squares

from .errors import InfeasibleNullError, InvalidParameterError, SingularMomentError
from .moments import FactorModel, MomentSystem, unvech

__all__ = [
    "ParamSpace",
    "FitResult",
    "Coordinates",
    "q_n",
    "initial_theta",
    "minimize",
    "minimize_full",
    "minimize_null",
    "profile_beta",
]

_BAD_RESIDUAL = 1e8
_MAX_NFEV = 500


@dataclass(frozen=True)
class ParamSpace:
    """Box for theta.

    The strongly identified block is unbounded by default and ``beta`` lies in
    ``[beta_min, beta_max]``.  ``feasibility_penalty`` adds a residual that
    penalizes negative implied error variances; it is off by default so
    that nuisance estimates can sit anywhere in the box.
    """

    model: FactorModel
    lower: np.ndarray
    upper: np.ndarray
    beta_min: float = 0.01
    beta_max: float = 10.0
    feasibility_penalty: float = 0.0

    def __post_init__(self):
        lo = np.array(self.lower, dtype=float)
        hi = np.array(self.upper, dtype=float)
        if lo.shape != (self.model.q,) or hi.shape != (self.model.q,):
            raise InvalidParameterError("bounds must have one entry per theta coordinate")
        if not np.all(lo < hi):
            raise InvalidParameterError("lower bounds must be strictly below upper bounds")
        if not 0 < self.beta_min < self.beta_max < np.inf:
            raise InvalidParameterError("beta bounds must satisfy 0 < beta_min < beta_max < inf")
        bi = self.model.beta_index
        if bi is not None and (lo[bi] != self.beta_min or hi[bi] != self.beta_max):
            raise InvalidParameterError("beta coordinate bounds disagree with beta_min/beta_max")
        lo.setflags(write=False)
        hi.setflags(write=False)
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @classmethod
    def default(
        cls,
        model: FactorModel,
        beta_min: float = 0.01,
        beta_max: float = 10.0,
        feasibility_penalty: float = 0.0,
    ) -> "ParamSpace":
        lo = np.full(model.q, -np.inf)
        hi = np.full(model.q, np.inf)
        if model.beta_index is not None:
            lo[model.beta_index] = beta_min
            hi[model.beta_index] = beta_max
        return cls(model, lo, hi, beta_min, beta_max, feasibility_penalty)

    def contains(self, x) -> bool:
        x = np.asarray(x, dtype=float)
        return bool(np.all(x >= self.lower) and np.all(x <= self.upper))


@dataclass(frozen=True)
class FitResult:
    """Outcome of a minimization of ``Q``.

    ``x`` is the full theta vector; ``theta_hat`` the matching dataclass.
    """

    x: np.ndarray
    qmin: float
    converged: bool
    starts_used: int
    gradient_norm: float
    model: FactorModel = field(repr=False)

    @property
    def theta_hat(self):
        return self.model.theta(self.x)


@dataclass
class Coordinates:
    """Map from free coordinates ``z`` to a full theta vector.

    ``base`` supplies the values of pinned coordinates.  When ``solved`` is
    set, that coordinate is recomputed by ``solve_fn(x)`` after the free
    coordinates are written, and ``solve_grad(x)`` returns its gradient
    with respect to the full vector (only free entries are used).
    """

    base: np.ndarray
    free: np.ndarray
    solved: int | None = None
    solve_fn: Callable[[np.ndarray], float] | None = None
    solve_grad: Callable[[np.ndarray], np.ndarray] | None = None

    def __post_init__(self):
        self.base = np.array(self.base, dtype=float)
        self.free = np.asarray(self.free, dtype=int)

    @property
    def q(self) -> int:
        return self.base.size

    def embed(self, z) -> np.ndarray:
        x = self.base.copy()
        x[self.free] = z
        if self.solved is not None:
            x[self.solved] = self.solve_fn(x)
        return x

    def jacobian(self, z, x=None) -> np.ndarray:
        if x is None:
            x = self.embed(z)
        jac = np.zeros((self.q, self.free.size))
        jac[self.free, np.arange(self.free.size)] = 1.0
        if self.solved is not None:
            jac[self.solved] = np.asarray(self.solve_grad(x), dtype=float)[self.free]
        return jac


def q_n(theta, ms: MomentSystem, model: FactorModel | None = None) -> float:
    """GMM objective ``n gbar' V^{-1} gbar`` at ``theta``."""
    if model is None:
        from .moments import _model_of

        model = _model_of(theta)
    g = ms.gbar_base - model.vech_omega(theta)
    w = ms.whiten(g)
    return float(ms.n * w @ w)


def _sample_cov(ms: MomentSystem) -> np.ndarray:
    return unvech(ms.gbar_base)


def _clip_beta(b: float, space: ParamSpace) -> float:
    if not np.isfinite(b):
        return 1.0 if space.beta_min <= 1.0 <= space.beta_max else 0.5 * (space.beta_min + space.beta_max)
    return float(np.clip(b, space.beta_min, space.beta_max))


def initial_theta(ms: MomentSystem, space: ParamSpace) -> np.ndarray:
    """Closed-form starting value from the sample covariance matrix.

    The strongly identified block is read off the sample covariances.  For
    one factor, ``beta = rho_j rho_k / tau_jk`` from the pair with the
    largest ``|tau_jk|`` (used when it exceeds 1e-3).  For two factors,
    ``beta`` solves ``tau_3k(beta) = S_3k`` or ``tau_4k(beta) = S_4k``,
    whichever equation is best conditioned.
    """
    model = space.model
    s = _sample_cov(ms)
    p = model.p
    if model.factors == 0:
        return np.diag(s).copy()
    if model.factors == 1:
        rho = s[1:, 0]
        best, beta = 1e-3, np.nan
        for j in range(1, p):
            for k in range(j + 1, p):
                if abs(s[j, k]) > best:
                    best = abs(s[j, k])
                    beta = s[j, 0] * s[k, 0] / s[j, k]
        x = np.concatenate([rho, np.diag(s), [np.nan]])
        x[-1] = _clip_beta(beta if beta > 0 else np.nan, space)
        return x
    rho1 = s[2:, 0]
    rho2 = s[2:, 1]
    chi, s12 = s[3, 2], s[1, 0]
    x = np.concatenate([rho1, rho2, np.diag(s), [chi, s12, np.nan]])

    def r(j, c):
        return s[j - 1, c - 1]

    best, beta = 0.0, np.nan
    for k in range(5, p + 1):
        for t, o in ((3, 4), (4, 3)):
            target = s[k - 1, t - 1]
            # target * (beta r_o1 - s12 r_o2) = r_t2 (r_k2 r_o1 - r_k1 r_o2) + chi (beta r_k1 - s12 r_k2)
            coef = target * r(o, 1) - chi * r(k, 1)
            rhs = r(t, 2) * (r(k, 2) * r(o, 1) - r(k, 1) * r(o, 2)) - chi * s12 * r(k, 2) + target * s12 * r(o, 2)
            if abs(coef) > best and coef != 0:
                cand = rhs / coef
                if cand > 0:
                    best, beta = abs(coef), cand
    x[-1] = _clip_beta(beta, space)
    return x


def _implied_phi(model: FactorModel, x: np.ndarray) -> np.ndarray | None:
    from .model_core import invert_1f, invert_2f

    try:
        theta = model.theta(x)
        if model.factors == 1:
            gamma, _ = invert_1f(theta)
        else:
            gamma, _ = invert_2f(theta)
    except ArithmeticError:
        return None
    except ValueError:
        return None
    return gamma.phi


class _Problem:
    def __init__(self, ms: MomentSystem, space: ParamSpace, coords: Coordinates):
        self.ms = ms
        self.space = space
        self.model = space.model
        self.coords = coords
        self.sqrt_n = np.sqrt(ms.n)
        self.k = ms.k
        self.penalty = space.feasibility_penalty if self.model.factors > 0 else 0.0
        self.n_res = self.k + (self.model.p if self.penalty > 0 else 0)

    def _eval(self, z):
        try:
            x = self.coords.embed(z)
            if not np.all(np.isfinite(x)):
                return None, None
            v = self.model.vech_omega(x)
        except (SingularMomentError, ZeroDivisionError, FloatingPointError):
            return None, None
        if not np.all(np.isfinite(v)):
            return None, None
        return x, v

    def residual(self, z) -> np.ndarray:
        x, v = self._eval(z)
        if x is None:
            return np.full(self.n_res, _BAD_RESIDUAL)
        res = self.sqrt_n * self.ms.whiten(self.ms.gbar_base - v)
        if self.penalty > 0:
            phi = _implied_phi(self.model, x)
            extra = np.zeros(self.model.p) if phi is None else self.penalty * np.minimum(phi, 0.0)
            res = np.concatenate([res, extra])
        return res

    def jacobian(self, z) -> np.ndarray:
        x, v = self._eval(z)
        nf = self.coords.free.size
        if x is None:
            return np.zeros((self.n_res, nf))
        try:
            dv = self.model.dvech_omega(x) @ self.coords.jacobian(z, x)
        except (SingularMomentError, ZeroDivisionError):
            return np.zeros((self.n_res, nf))
        jac = -self.sqrt_n * self.ms.whiten(dv)
        if self.penalty > 0:
            h = 1e-7
            base = self.residual(z)[self.k :]
            cols = []
            for i in range(nf):
                zz = np.array(z, dtype=float)
                zz[i] += h
                cols.append((self.residual(zz)[self.k :] - base) / h)
            jac = np.vstack([jac, np.column_stack(cols)])
        return jac


def minimize(
    ms: MomentSystem,
    space: ParamSpace,
    coords: Coordinates,
    starts: list[np.ndarray],
) -> FitResult:
    """Minimize ``Q`` over the free coordinates from each start; keep the best.

    ``starts`` are full theta vectors; their free entries are used.
    """
    if not starts:
        raise InvalidParameterError("at least one start is required")
    prob = _Problem(ms, space, coords)
    lo = space.lower[coords.free]
    hi = space.upper[coords.free]
    best = None
    for x0 in starts:
        z0 = np.array(np.asarray(x0, dtype=float)[coords.free])
        z0 = np.clip(z0, lo, hi)
        span = np.where(np.isfinite(hi - lo), hi - lo, 1.0)
        z0 = np.clip(z0, lo + 1e-10 * span, hi - 1e-10 * span)
        if not np.all(np.isfinite(prob.residual(z0)) & (np.abs(prob.residual(z0)) < _BAD_RESIDUAL)):
            continue
        sol = least_squares(
            prob.residual,
            z0,
            jac=prob.jacobian,
            bounds=(lo, hi),
            method="trf",
            x_scale="jac",
            ftol=1e-12,
            xtol=1e-12,
            gtol=1e-10,
            max_nfev=_MAX_NFEV,
        )
        cost = float(sol.fun @ sol.fun)
        if best is None or cost < best[0]:
            best = (cost, sol)
    if best is None:
        raise InfeasibleNullError("no start point gives finite moments")
    cost, sol = best
    x = coords.embed(sol.x)
    grad = 2.0 * sol.jac.T @ sol.fun
    with np.errstate(invalid="ignore"):
        at_lo = np.isfinite(lo) & (sol.x <= lo + 1e-10 * np.maximum(1.0, np.abs(lo))) & (grad > 0)
        at_hi = np.isfinite(hi) & (sol.x >= hi - 1e-10 * np.maximum(1.0, np.abs(hi))) & (grad < 0)
    grad = np.where(at_lo | at_hi, 0.0, grad)
    gnorm = float(np.max(np.abs(grad))) if grad.size else 0.0
    r = sol.fun[: ms.k]
    qmin = float(r @ r)
    converged = bool(sol.status > 0) or gnorm < 1e-8 * (1.0 + qmin)
    return FitResult(
        x=x,
        qmin=qmin,
        converged=converged,
        starts_used=len(starts),
        gradient_norm=gnorm,
        model=space.model,
    )


def _random_starts(x0: np.ndarray, space: ParamSpace, count: int, rng) -> list[np.ndarray]:
    model = space.model
    out = []
    scale = np.maximum(np.abs(x0), 0.1)
    for _ in range(count):
        x = x0 + 0.1 * scale * rng.standard_normal(x0.size)
        if model.beta_index is not None:
            x[model.beta_index] = rng.uniform(space.beta_min, space.beta_max)
        out.append(x)
    return out


def minimize_full(
    ms: MomentSystem,
    space: ParamSpace,
    starts: int = 10,
    seed: int | np.random.Generator | None = 0,
) -> FitResult:
    """Unrestricted GMM fit with a closed-form start plus random starts.

    The random starts perturb the strongly identified block by 10% and
    draw ``beta`` uniformly over its bounds.  Two further starts put the
    closed-form point at either ``beta`` bound, since ``Q`` can be
    multimodal in ``beta`` with the minimum on the edge of the box.
    """
    if starts < 1:
        raise InvalidParameterError("starts must be at least 1")
    model = space.model
    if model.p != ms.p:
        raise InvalidParameterError(f"model has p={model.p} but data have p={ms.p}")
    x0 = initial_theta(ms, space)
    coords = Coordinates(base=x0, free=np.arange(model.q))
    if model.factors == 0:
        return minimize(ms, space, coords, [x0])
    rng = np.random.default_rng(seed)
    edges = _null_starts(ms, space, coords, [space.beta_min, space.beta_max])[1:]
    cands = [x0] + edges + _random_starts(x0, space, starts - 1, rng)
    return minimize(ms, space, coords, cands)


def _null_starts(ms: MomentSystem, space: ParamSpace, coords: Coordinates, beta_grid) -> list[np.ndarray]:
    x0 = initial_theta(ms, space)
    bi = space.model.beta_index
    starts = [x0]
    if bi is not None and bi in coords.free:
        for b in beta_grid:
            x = x0.copy()
            x[bi] = b
            starts.append(x)
    return starts


def minimize_null(
    ms: MomentSystem,
    space: ParamSpace,
    hyp,
    r0: float,
    beta0: float | None = None,
    extra_starts: int = 0,
) -> FitResult:
    """Minimize ``Q`` with ``r(theta) = r0`` imposed.

    ``hyp`` must provide ``null_coordinates(space, r0, beta0)``.  For
    hypotheses that are solved for a strongly identified coordinate,
    ``beta0`` pins ``beta`` as well; when it is None, ``beta`` stays free
    (see :func:`profile_beta`).
    """
    coords = hyp.null_coordinates(space, r0, beta0)
    grid = np.geomspace(space.beta_min, space.beta_max, extra_starts + 2)[1:-1] if extra_starts else []
    return minimize(ms, space, coords, _null_starts(ms, space, coords, grid))


def profile_beta(
    ms: MomentSystem,
    space: ParamSpace,
    hyp,
    r0: float,
    beta_starts: int = 3,
) -> FitResult:
    """Joint minimization over ``beta`` and the free nuisance with ``r = r0``.

    Starts from the closed-form initializer and ``beta_starts`` values
    spread geometrically over the ``beta`` bounds.
    """
    if getattr(hyp, "approach", "B") != "B":
        raise InvalidParameterError("profiling over beta applies to hypotheses solved for a pi coordinate")
    coords = hyp.null_coordinates(space, r0, None)
    grid = np.geomspace(space.beta_min, space.beta_max, beta_starts + 2)[1:-1]
    return minimize(ms, space, coords, _null_starts(ms, space, coords, grid))
