"""Covariance moments as functions of the reparameterized coordinates.

All moments have the form ``W_j W_k - Omega_jk(theta)`` so the sample
moment vector splits into a data-only part (the mean of
``vech(W_i W_i')``) minus ``vech(Omega(theta))``.  Consequently the
Jacobian with respect to ``theta`` does not depend on the data and the
moment variance matrix can be estimated once per dataset.

Half-vectorization stacks the lower triangle column by column, so for
``p = 3`` the order is ``(1,1), (2,1), (3,1), (2,2), (3,2), (3,3)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy.linalg import cho_factor, solve_triangular

from .errors import (
    DataValidationError,
    InvalidParameterError,
    SingularMomentError,
    SingularWeightError,
)
from .model_core import (
    OneFactorTheta,
    TwoFactorTheta,
    ZeroFactorTheta,
    theta_from_vector,
)

__all__ = [
    "VechIndex",
    "vech",
    "unvech",
    "FactorModel",
    "ZeroFactorModel",
    "OneFactorModel",
    "TwoFactorModel",
    "model_for",
    "tau_2f",
    "MomentSystem",
    "vhat",
    "gbar",
    "ThetaJacobian",
    "jacobian_theta",
]

_SYM_TOL = 1e-10
_DEN_RTOL = 1e-12
_MAX_COND = 1e12


@dataclass(frozen=True)
class VechIndex:
    """Bijection between lower-triangle pairs and half-vectorized positions.

    Pairs are 0-based ``(row, col)`` with ``row >= col``.
    """

    p: int
    rows: np.ndarray = field(init=False, repr=False)
    cols: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.p < 1:
            raise InvalidParameterError("p must be positive")
        cols, rows = [], []
        for c in range(self.p):
            for r in range(c, self.p):
                rows.append(r)
                cols.append(c)
        rows = np.array(rows)
        cols = np.array(cols)
        rows.setflags(write=False)
        cols.setflags(write=False)
        object.__setattr__(self, "rows", rows)
        object.__setattr__(self, "cols", cols)

    @property
    def k(self) -> int:
        return self.p * (self.p + 1) // 2

    def index(self, j: int, k: int) -> int:
        """Position of the 0-based pair ``(j, k)`` in either order."""
        r, c = max(j, k), min(j, k)
        if not 0 <= c <= r < self.p:
            raise InvalidParameterError(f"pair ({j}, {k}) out of range for p={self.p}")
        return c * self.p - c * (c - 1) // 2 + (r - c)

    def pairs(self) -> list[tuple[int, int]]:
        return list(zip(self.rows.tolist(), self.cols.tolist()))


def vech(m) -> np.ndarray:
    m = np.asarray(m, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise InvalidParameterError(f"expected a square matrix, got shape {m.shape}")
    if not np.allclose(m, m.T, rtol=0, atol=_SYM_TOL):
        raise InvalidParameterError("matrix is not symmetric")
    idx = VechIndex(m.shape[0])
    return m[idx.rows, idx.cols]


def unvech(v) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    p = int(round((np.sqrt(8 * v.size + 1) - 1) / 2))
    if p * (p + 1) // 2 != v.size:
        raise InvalidParameterError(f"length {v.size} is not triangular")
    idx = VechIndex(p)
    m = np.zeros((p, p))
    m[idx.rows, idx.cols] = v
    m[idx.cols, idx.rows] = v
    return m


def _guarded_div(num: float, den: float, what: str) -> float:
    if abs(den) < _DEN_RTOL * max(1.0, abs(num)):
        raise SingularMomentError(f"denominator of {what} is numerically zero ({den:.3g})")
    return num / den


# ---------------------------------------------------------------------------
# models: vech(Omega(theta)) and its derivative
# ---------------------------------------------------------------------------


class FactorModel:
    """Moment map ``theta -> vech(Omega(theta))`` for a fixed factor count.

    Subclasses define ``factors``, ``q``, ``names`` and the two maps
    :meth:`vech_omega` and :meth:`dvech_omega`.  ``beta_index`` is the
    position of the possibly weakly identified coordinate, or None.
    """

    factors: int
    beta_index: int | None

    def __init__(self, p: int):
        self.p = int(p)
        self.vidx = VechIndex(self.p)

    @property
    def k(self) -> int:
        return self.vidx.k

    @property
    def q(self) -> int:
        raise NotImplementedError

    @property
    def names(self) -> list[str]:
        raise NotImplementedError

    def theta(self, x):
        return theta_from_vector(x, self.p, self.factors)

    def vector(self, theta) -> np.ndarray:
        x = np.asarray(theta.to_vector() if hasattr(theta, "to_vector") else theta, dtype=float)
        if x.size != self.q:
            raise InvalidParameterError(f"expected {self.q} coordinates, got {x.size}")
        return x

    def vech_omega(self, x) -> np.ndarray:
        raise NotImplementedError

    def dvech_omega(self, x) -> np.ndarray:
        raise NotImplementedError

    def __eq__(self, other):
        return type(self) is type(other) and self.p == other.p

    def __hash__(self):
        return hash((type(self).__name__, self.p))

    def __repr__(self):
        return f"{type(self).__name__}(p={self.p})"


class ZeroFactorModel(FactorModel):
    factors = 0
    beta_index = None

    @property
    def q(self) -> int:
        return self.p

    @property
    def names(self) -> list[str]:
        return [f"omega{j}" for j in range(1, self.p + 1)]

    def vech_omega(self, x) -> np.ndarray:
        x = self.vector(x)
        out = np.zeros(self.k)
        out[[self.vidx.index(j, j) for j in range(self.p)]] = x
        return out

    def dvech_omega(self, x) -> np.ndarray:
        self.vector(x)
        out = np.zeros((self.k, self.q))
        for j in range(self.p):
            out[self.vidx.index(j, j), j] = 1.0
        return out


class OneFactorModel(FactorModel):
    """Layout ``(rho_2..rho_p, omega_1..omega_p, beta)``."""

    factors = 1

    def __init__(self, p: int):
        if p < 3:
            raise InvalidParameterError("a one-factor model needs p >= 3")
        super().__init__(p)
        self.beta_index = 2 * p - 1

    @property
    def q(self) -> int:
        return 2 * self.p

    @property
    def names(self) -> list[str]:
        p = self.p
        return (
            [f"rho{j}" for j in range(2, p + 1)]
            + [f"omega{j}" for j in range(1, p + 1)]
            + ["beta"]
        )

    def rho_col(self, j: int) -> int:
        """Column of ``rho_j`` for 1-based ``j >= 2``."""
        return j - 2

    def omega_col(self, j: int) -> int:
        return self.p - 1 + j - 1

    def vech_omega(self, x) -> np.ndarray:
        x = self.vector(x)
        p = self.p
        rho = np.concatenate([[np.nan], x[: p - 1]])  # rho[j-1] = rho_j, entry 0 unused
        omega = x[p - 1 : 2 * p - 1]
        beta = x[-1]
        out = np.empty(self.k)
        for pos, (r, c) in enumerate(self.vidx.pairs()):
            if r == c:
                out[pos] = omega[r]
            elif c == 0:
                out[pos] = rho[r]
            else:
                out[pos] = rho[r] * rho[c] / beta
        return out

    def dvech_omega(self, x) -> np.ndarray:
        x = self.vector(x)
        p = self.p
        rho = np.concatenate([[np.nan], x[: p - 1]])
        beta = x[-1]
        out = np.zeros((self.k, self.q))
        for pos, (r, c) in enumerate(self.vidx.pairs()):
            if r == c:
                out[pos, self.omega_col(r + 1)] = 1.0
            elif c == 0:
                out[pos, self.rho_col(r + 1)] = 1.0
            else:
                out[pos, self.rho_col(r + 1)] = rho[c] / beta
                out[pos, self.rho_col(c + 1)] = rho[r] / beta
                out[pos, self.beta_index] = -rho[r] * rho[c] / beta**2
        return out


class TwoFactorModel(FactorModel):
    """Layout ``(rho_31..rho_p1, rho_32..rho_p2, omega_1..omega_p, chi, sigma12, beta)``."""

    factors = 2

    def __init__(self, p: int):
        if p < 5:
            raise InvalidParameterError("a two-factor model needs p >= 5")
        super().__init__(p)
        m = p - 2
        self.chi_index = 2 * m + p
        self.sigma12_index = 2 * m + p + 1
        self.beta_index = 2 * m + p + 2

    @property
    def q(self) -> int:
        return 3 * self.p - 1

    @property
    def names(self) -> list[str]:
        p = self.p
        return (
            [f"rho{j}1" for j in range(3, p + 1)]
            + [f"rho{j}2" for j in range(3, p + 1)]
            + [f"omega{j}" for j in range(1, p + 1)]
            + ["chi", "sigma12", "beta"]
        )

    def rho_col(self, j: int, c: int) -> int:
        """Column of ``rho_{jc}`` for 1-based ``j >= 3`` and factor ``c``."""
        return (j - 3) + (self.p - 2) * (c - 1)

    def omega_col(self, j: int) -> int:
        return 2 * (self.p - 2) + j - 1

    def _tau_value_grad(self, x: np.ndarray, j: int, k: int) -> tuple[float, dict[int, float]]:
        """``tau_jk`` and its sparse gradient, 1-based ``3 <= j < k``, ``k >= 5``."""
        rc = self.rho_col
        chi, s12, beta = x[self.chi_index], x[self.sigma12_index], x[self.beta_index]
        i_chi, i_s12, i_beta = self.chi_index, self.sigma12_index, self.beta_index

        def rho(a, c):
            return x[rc(a, c)]

        def a_of(a):
            return beta * rho(a, 1) - s12 * rho(a, 2)

        def add(g, col, v):
            g[col] = g.get(col, 0.0) + v

        if j in (3, 4):
            t, o = j, 7 - j
            rt2, ro1, ro2 = rho(t, 2), rho(o, 1), rho(o, 2)
            rk1, rk2 = rho(k, 1), rho(k, 2)
            ak = a_of(k)
            num = rt2 * (rk2 * ro1 - rk1 * ro2) + chi * ak
            den = a_of(o)
            tau = _guarded_div(num, den, f"tau_{j}{k}")
            dn: dict[int, float] = {}
            add(dn, rc(t, 2), rk2 * ro1 - rk1 * ro2)
            add(dn, rc(k, 2), rt2 * ro1 - chi * s12)
            add(dn, rc(o, 1), rt2 * rk2)
            add(dn, rc(k, 1), -rt2 * ro2 + chi * beta)
            add(dn, rc(o, 2), -rt2 * rk1)
            add(dn, i_chi, ak)
            add(dn, i_s12, -chi * rk2)
            add(dn, i_beta, chi * rk1)
            dd = {rc(o, 1): beta, rc(o, 2): -s12, i_s12: -ro2, i_beta: ro1}
        else:
            names = {
                "31": rc(3, 1), "32": rc(3, 2), "41": rc(4, 1), "42": rc(4, 2),
                "j1": rc(j, 1), "j2": rc(j, 2), "k1": rc(k, 1), "k2": rc(k, 2),
            }
            q_terms = [(1.0, ("31", "41", "j2", "k2")), (-1.0, ("32", "42", "j1", "k1"))]
            r_terms = [
                (1.0, ("32", "42", "j1", "k2")),
                (1.0, ("32", "42", "j2", "k1")),
                (-1.0, ("31", "42", "j2", "k2")),
                (-1.0, ("32", "41", "j2", "k2")),
            ]
            vals = {key: x[col] for key, col in names.items()}

            def poly(terms):
                val = 0.0
                grad: dict[str, float] = {}
                for coef, mono in terms:
                    factors = [vals[v] for v in mono]
                    val += coef * np.prod(factors)
                    for i, v in enumerate(mono):
                        grad[v] = grad.get(v, 0.0) + coef * np.prod(factors[:i] + factors[i + 1 :])
                return val, grad

            qv, qg = poly(q_terms)
            rv, rg = poly(r_terms)
            aj, ak, a3, a4 = a_of(j), a_of(k), a_of(3), a_of(4)
            num = beta * qv + s12 * rv + chi * aj * ak
            den = a3 * a4
            tau = _guarded_div(num, den, f"tau_{j}{k}")
            dn = {}
            for key, col in names.items():
                add(dn, col, beta * qg.get(key, 0.0) + s12 * rg.get(key, 0.0))
            add(dn, rc(j, 1), chi * beta * ak)
            add(dn, rc(j, 2), -chi * s12 * ak)
            add(dn, rc(k, 1), chi * beta * aj)
            add(dn, rc(k, 2), -chi * s12 * aj)
            add(dn, i_chi, aj * ak)
            add(dn, i_s12, rv - chi * (rho(j, 2) * ak + aj * rho(k, 2)))
            add(dn, i_beta, qv + chi * (rho(j, 1) * ak + aj * rho(k, 1)))
            dd = {
                rc(3, 1): beta * a4,
                rc(3, 2): -s12 * a4,
                rc(4, 1): beta * a3,
                rc(4, 2): -s12 * a3,
                i_s12: -(rho(3, 2) * a4 + a3 * rho(4, 2)),
                i_beta: rho(3, 1) * a4 + a3 * rho(4, 1),
            }
        grad = {col: v / den for col, v in dn.items()}
        for col, v in dd.items():
            grad[col] = grad.get(col, 0.0) - tau * v / den
        return tau, grad

    def _entry(self, x: np.ndarray, r: int, c: int, with_grad: bool):
        """Value (and sparse gradient) of ``Omega_{rc}`` for 0-based ``r >= c``."""
        jr, jc = r + 1, c + 1
        if r == c:
            col = self.omega_col(jr)
        elif (jr, jc) == (2, 1):
            col = self.sigma12_index
        elif jc in (1, 2):
            col = self.rho_col(jr, jc)
        elif (jr, jc) == (4, 3):
            col = self.chi_index
        else:
            tau, grad = self._tau_value_grad(x, jc, jr)
            return (tau, grad) if with_grad else tau
        return (x[col], {col: 1.0}) if with_grad else x[col]

    def vech_omega(self, x) -> np.ndarray:
        x = self.vector(x)
        return np.array([self._entry(x, r, c, False) for r, c in self.vidx.pairs()])

    def dvech_omega(self, x) -> np.ndarray:
        x = self.vector(x)
        out = np.zeros((self.k, self.q))
        for pos, (r, c) in enumerate(self.vidx.pairs()):
            _, grad = self._entry(x, r, c, True)
            for col, v in grad.items():
                out[pos, col] = v
        return out


def model_for(p: int, factors: int) -> FactorModel:
    return {0: ZeroFactorModel, 1: OneFactorModel, 2: TwoFactorModel}[factors](p)


def _model_of(theta) -> FactorModel:
    if isinstance(theta, ZeroFactorTheta):
        return ZeroFactorModel(theta.p)
    if isinstance(theta, OneFactorTheta):
        return OneFactorModel(theta.p)
    if isinstance(theta, TwoFactorTheta):
        return TwoFactorModel(theta.p)
    raise InvalidParameterError(f"unsupported theta type {type(theta).__name__}")


def tau_2f(theta: TwoFactorTheta, j: int, k: int) -> float:
    """Implied covariance of variables ``j < k`` (1-based) for ``j >= 3, k >= 5``."""
    if not (3 <= j < k <= theta.p and k >= 5):
        raise InvalidParameterError(f"tau_{j}{k} is not a derived moment for p={theta.p}")
    model = TwoFactorModel(theta.p)
    tau, _ = model._tau_value_grad(theta.to_vector(), j, k)
    return tau


# ---------------------------------------------------------------------------
# sample moments
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MomentSystem:
    """Data summary needed by every statistic: moment mean and variance.

    ``chol`` is the lower Cholesky factor of ``vhat``; statistics whiten
    moment vectors with it instead of forming an explicit inverse.
    """

    n: int
    gbar_base: np.ndarray
    vhat: np.ndarray
    vech_index: VechIndex
    chol: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        g = np.array(self.gbar_base, dtype=float)
        v = np.array(self.vhat, dtype=float)
        k = self.vech_index.k
        if g.shape != (k,) or v.shape != (k, k):
            raise InvalidParameterError("gbar_base/vhat shapes do not match the vech index")
        if not np.allclose(v, v.T, rtol=0, atol=_SYM_TOL * max(1.0, np.abs(v).max())):
            raise SingularWeightError("moment variance matrix is not symmetric")
        v = (v + v.T) / 2
        if not np.all(np.isfinite(v)):
            raise SingularWeightError("moment variance matrix has non-finite entries")
        cond = np.linalg.cond(v)
        if not np.isfinite(cond) or cond > _MAX_COND:
            raise SingularWeightError(f"moment variance matrix is near singular (cond={cond:.3g})")
        try:
            c, _ = cho_factor(v, lower=True)
        except np.linalg.LinAlgError as exc:
            raise SingularWeightError("moment variance matrix is not positive definite") from exc
        chol = np.tril(c)
        for arr in (g, v, chol):
            arr.setflags(write=False)
        object.__setattr__(self, "n", int(self.n))
        object.__setattr__(self, "gbar_base", g)
        object.__setattr__(self, "vhat", v)
        object.__setattr__(self, "chol", chol)

    @property
    def p(self) -> int:
        return self.vech_index.p

    @property
    def k(self) -> int:
        return self.vech_index.k

    def whiten(self, a) -> np.ndarray:
        """``L^{-1} a`` for a vector or a matrix of columns."""
        return solve_triangular(self.chol, a, lower=True, check_finite=False)

    @cached_property
    def whitened_base(self) -> np.ndarray:
        return self.whiten(self.gbar_base)

    def permuted(self, perm) -> "MomentSystem":
        """Moment system of the dataset with columns reordered as ``data[:, perm]``."""
        perm = np.asarray(perm)
        if sorted(perm.tolist()) != list(range(self.p)):
            raise InvalidParameterError("perm must be a permutation of range(p)")
        idx = self.vech_index
        src = np.array([idx.index(perm[r], perm[c]) for r, c in idx.pairs()])
        return MomentSystem(
            n=self.n,
            gbar_base=self.gbar_base[src],
            vhat=self.vhat[np.ix_(src, src)],
            vech_index=idx,
        )


def vhat(data) -> MomentSystem:
    """Moment system from an ``n x p`` array of (demeaned) observations."""
    w = np.asarray(data, dtype=float)
    if w.ndim != 2:
        raise DataValidationError(f"data must be two-dimensional, got shape {w.shape}")
    n, p = w.shape
    idx = VechIndex(p)
    if n <= idx.k:
        raise DataValidationError(f"need n > p(p+1)/2 = {idx.k} observations, got {n}")
    if not np.all(np.isfinite(w)):
        raise DataValidationError("data contain non-finite values")
    prods = w[:, idx.rows] * w[:, idx.cols]
    mean = prods.mean(axis=0)
    centered = prods - mean
    v = centered.T @ centered / n
    return MomentSystem(n=n, gbar_base=mean, vhat=v, vech_index=idx)


def gbar(theta, ms: MomentSystem) -> np.ndarray:
    model = _model_of(theta)
    if model.p != ms.p:
        raise InvalidParameterError(f"theta has p={model.p} but data have p={ms.p}")
    return ms.gbar_base - model.vech_omega(theta)


@dataclass(frozen=True)
class ThetaJacobian:
    """Derivative of the sample moments with respect to theta (``k x q``)."""

    D: np.ndarray

    @property
    def q(self) -> int:
        return self.D.shape[1]


def jacobian_theta(theta) -> ThetaJacobian:
    model = _model_of(theta)
    return ThetaJacobian(D=-model.dvech_omega(theta))
