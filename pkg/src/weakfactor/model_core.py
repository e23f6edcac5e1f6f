"""Structural and reparameterized factor-model parameters.

Structural parameters use the normalization that fixes the first ``m`` rows
of the loading matrix to the identity.  The reparameterized coordinates
``theta = (pi, beta)`` replace every structural parameter except one factor
variance with an element of the covariance matrix of the observed data, so
that ``pi`` is strongly identified and only ``beta`` can be weakly
identified.

Vector layouts used throughout the package:

* zero factors: ``(omega_1..omega_p)``
* one factor: ``(rho_2..rho_p, omega_1..omega_p, beta)``
* two factors: ``(rho_31..rho_p1, rho_32..rho_p2, omega_1..omega_p, chi,
  sigma12, beta)``
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations

import numpy as np

from .errors import DomainError, InvalidParameterError, SingularInversionError

__all__ = [
    "OneFactorParams",
    "TwoFactorParams",
    "ZeroFactorTheta",
    "OneFactorTheta",
    "TwoFactorTheta",
    "IdStrength",
    "omega_of_gamma",
    "reparam_1f",
    "invert_1f",
    "reparam_2f",
    "invert_2f",
    "id_strength_1f",
    "id_strength_2f",
    "theta_from_vector",
]

_DEN_RTOL = 1e-12


def _as_vector(x, name: str) -> np.ndarray:
    arr = np.array(x, dtype=float)
    if arr.ndim != 1:
        raise InvalidParameterError(f"{name} must be one-dimensional, got shape {arr.shape}")
    arr.setflags(write=False)
    return arr


def _check_den(num: float, den: float, what: str) -> None:
    if abs(den) < _DEN_RTOL * max(1.0, abs(num)):
        raise SingularInversionError(f"denominator of {what} is numerically zero ({den:.3g})")


# ---------------------------------------------------------------------------
# structural parameters
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class OneFactorParams:
    """One-factor structural parameters ``(lambda, sigma^2, phi)``.

    ``lam[0]`` is the normalized loading and must equal 1.  Negative error
    variances are representable so that images of arbitrary ``theta`` points
    can be inspected; :attr:`is_valid` reports structural validity.
    """

    lam: np.ndarray
    sigma2: float
    phi: np.ndarray

    def __post_init__(self):
        lam = _as_vector(self.lam, "lam")
        phi = _as_vector(self.phi, "phi")
        if lam.shape != phi.shape:
            raise InvalidParameterError("lam and phi must have the same length")
        if lam.size < 3:
            raise InvalidParameterError("a one-factor model needs p >= 3 observed variables")
        if lam[0] != 1.0:
            raise InvalidParameterError("the first loading is normalized to 1")
        object.__setattr__(self, "lam", lam)
        object.__setattr__(self, "phi", phi)
        object.__setattr__(self, "sigma2", float(self.sigma2))

    @property
    def p(self) -> int:
        return self.lam.size

    @property
    def is_valid(self) -> bool:
        return self.sigma2 > 0 and bool(np.all(self.phi >= 0))


@dataclass(frozen=True)
class TwoFactorParams:
    """Two-factor structural parameters ``(Lambda, Sigma, phi)``.

    ``lam`` is ``p x 2`` with its top ``2 x 2`` block equal to the identity and
    ``sigma`` is the symmetric factor covariance matrix.
    """

    lam: np.ndarray
    sigma: np.ndarray
    phi: np.ndarray

    def __post_init__(self):
        lam = np.array(self.lam, dtype=float)
        sigma = np.array(self.sigma, dtype=float)
        phi = _as_vector(self.phi, "phi")
        if lam.ndim != 2 or lam.shape[1] != 2:
            raise InvalidParameterError(f"lam must be p x 2, got shape {lam.shape}")
        if sigma.shape != (2, 2):
            raise InvalidParameterError(f"sigma must be 2 x 2, got shape {sigma.shape}")
        if lam.shape[0] != phi.size:
            raise InvalidParameterError("lam and phi disagree on p")
        if phi.size < 5:
            raise InvalidParameterError("a two-factor model needs p >= 5 observed variables")
        if not np.array_equal(lam[:2], np.eye(2)):
            raise InvalidParameterError("the top 2x2 block of lam is normalized to the identity")
        if sigma[0, 1] != sigma[1, 0]:
            raise InvalidParameterError("sigma must be symmetric")
        lam.setflags(write=False)
        sigma.setflags(write=False)
        object.__setattr__(self, "lam", lam)
        object.__setattr__(self, "sigma", sigma)
        object.__setattr__(self, "phi", phi)

    @property
    def p(self) -> int:
        return self.phi.size

    @property
    def is_valid(self) -> bool:
        s = self.sigma
        det = s[0, 0] * s[1, 1] - s[0, 1] ** 2
        return bool(
            np.all(np.isfinite(self.lam))
            and s[0, 0] > 0
            and det > 0
            and self.lam[2, 0] != 0
            and self.lam[3, 0] != 0
            and np.all(self.phi >= 0)
        )


def omega_of_gamma(gamma: OneFactorParams | TwoFactorParams) -> np.ndarray:
    """Covariance matrix ``Lambda Sigma Lambda' + Phi`` implied by ``gamma``."""
    if isinstance(gamma, OneFactorParams):
        lam = gamma.lam[:, None]
        return gamma.sigma2 * (lam @ lam.T) + np.diag(gamma.phi)
    if isinstance(gamma, TwoFactorParams):
        return gamma.lam @ gamma.sigma @ gamma.lam.T + np.diag(gamma.phi)
    raise InvalidParameterError(f"unsupported parameter type {type(gamma).__name__}")


# ---------------------------------------------------------------------------
# reparameterized coordinates
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ZeroFactorTheta:
    """Diagonal covariance model; only the variances are free."""

    omega: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "omega", _as_vector(self.omega, "omega"))

    @property
    def p(self) -> int:
        return self.omega.size

    def to_vector(self) -> np.ndarray:
        return np.array(self.omega)

    @classmethod
    def from_vector(cls, x, p: int) -> "ZeroFactorTheta":
        x = np.asarray(x, dtype=float)
        if x.size != p:
            raise InvalidParameterError(f"expected {p} coordinates, got {x.size}")
        return cls(x)


@dataclass(frozen=True)
class OneFactorTheta:
    """``theta = (rho_2..rho_p, omega_1..omega_p, beta)`` for one factor."""

    rho: np.ndarray
    omega: np.ndarray
    beta: float

    def __post_init__(self):
        rho = _as_vector(self.rho, "rho")
        omega = _as_vector(self.omega, "omega")
        if rho.size != omega.size - 1:
            raise InvalidParameterError("rho must have p-1 entries when omega has p")
        object.__setattr__(self, "rho", rho)
        object.__setattr__(self, "omega", omega)
        object.__setattr__(self, "beta", float(self.beta))

    @property
    def p(self) -> int:
        return self.omega.size

    @property
    def pi(self) -> np.ndarray:
        return np.concatenate([self.rho, self.omega])

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.rho, self.omega, [self.beta]])

    @classmethod
    def from_vector(cls, x, p: int) -> "OneFactorTheta":
        x = np.asarray(x, dtype=float)
        if x.size != 2 * p:
            raise InvalidParameterError(f"expected {2 * p} coordinates, got {x.size}")
        return cls(x[: p - 1], x[p - 1 : 2 * p - 1], x[-1])


@dataclass(frozen=True)
class TwoFactorTheta:
    """``theta = (rho1, rho2, omega, chi, sigma12, beta)`` for two factors.

    ``rho1[i]`` and ``rho2[i]`` hold ``rho_{j1}`` and ``rho_{j2}`` for
    variable ``j = i + 3``.
    """

    rho1: np.ndarray
    rho2: np.ndarray
    omega: np.ndarray
    chi: float
    sigma12: float
    beta: float

    def __post_init__(self):
        rho1 = _as_vector(self.rho1, "rho1")
        rho2 = _as_vector(self.rho2, "rho2")
        omega = _as_vector(self.omega, "omega")
        if rho1.size != omega.size - 2 or rho2.size != omega.size - 2:
            raise InvalidParameterError("rho1 and rho2 must have p-2 entries")
        object.__setattr__(self, "rho1", rho1)
        object.__setattr__(self, "rho2", rho2)
        object.__setattr__(self, "omega", omega)
        for name in ("chi", "sigma12", "beta"):
            object.__setattr__(self, name, float(getattr(self, name)))

    @property
    def p(self) -> int:
        return self.omega.size

    def rho(self, j: int, c: int) -> float:
        """``rho_{jc}`` with 1-based variable index ``j >= 3`` and factor ``c``."""
        return float((self.rho1 if c == 1 else self.rho2)[j - 3])

    @property
    def pi(self) -> np.ndarray:
        return np.concatenate([self.rho1, self.rho2, self.omega, [self.chi, self.sigma12]])

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.pi, [self.beta]])

    @classmethod
    def from_vector(cls, x, p: int) -> "TwoFactorTheta":
        x = np.asarray(x, dtype=float)
        if x.size != 3 * p - 1:
            raise InvalidParameterError(f"expected {3 * p - 1} coordinates, got {x.size}")
        m = p - 2
        return cls(x[:m], x[m : 2 * m], x[2 * m : 2 * m + p], x[-3], x[-2], x[-1])


def theta_from_vector(x, p: int, factors: int):
    """Build the theta dataclass for ``factors`` in {0, 1, 2} from a flat vector."""
    cls = {0: ZeroFactorTheta, 1: OneFactorTheta, 2: TwoFactorTheta}[factors]
    return cls.from_vector(x, p)


# ---------------------------------------------------------------------------
# one factor
# ---------------------------------------------------------------------------


def reparam_1f(gamma: OneFactorParams) -> OneFactorTheta:
    lam, s2 = gamma.lam, gamma.sigma2
    return OneFactorTheta(rho=lam[1:] * s2, omega=lam**2 * s2 + gamma.phi, beta=s2)


def invert_1f(theta: OneFactorTheta) -> tuple[OneFactorParams, bool]:
    """Structural parameters implied by ``theta`` plus a validity flag.

    The flag is False when an implied error variance is negative, i.e. when
    ``theta`` lies outside the image of the structural parameter space.
    """
    beta = theta.beta
    if not beta > 0:
        raise DomainError(f"beta must be positive, got {beta}")
    lam = np.concatenate([[1.0], theta.rho / beta])
    phi = theta.omega - np.concatenate([[beta], theta.rho**2 / beta])
    gamma = OneFactorParams(lam=lam, sigma2=beta, phi=phi)
    return gamma, gamma.is_valid


def id_strength_1f(theta: OneFactorTheta, n: int) -> "IdStrength":
    rho = theta.rho
    s = np.array([rho[a] * rho[b] for a, b in combinations(range(rho.size), 2)])
    return IdStrength(s=s, n=n)


# ---------------------------------------------------------------------------
# two factors
# ---------------------------------------------------------------------------


def reparam_2f(gamma: TwoFactorParams) -> TwoFactorTheta:
    lam, sig = gamma.lam, gamma.sigma
    cross = lam @ sig  # row j holds (lambda_1' Sigma lambda_j, lambda_2' Sigma lambda_j)
    omega = np.einsum("ij,jk,ik->i", lam, sig, lam) + gamma.phi
    return TwoFactorTheta(
        rho1=cross[2:, 0],
        rho2=cross[2:, 1],
        omega=omega,
        chi=float(lam[2] @ sig @ lam[3]),
        sigma12=sig[0, 1],
        beta=sig[1, 1],
    )


def lambda_31(theta: TwoFactorTheta) -> float:
    r32, r41, r42 = theta.rho(3, 2), theta.rho(4, 1), theta.rho(4, 2)
    num = theta.chi * theta.beta - r42 * r32
    den = theta.beta * r41 - theta.sigma12 * r42
    _check_den(num, den, "lambda_31")
    return num / den


def lambda_41(theta: TwoFactorTheta) -> float:
    r31, r32, r42 = theta.rho(3, 1), theta.rho(3, 2), theta.rho(4, 2)
    num = theta.chi * theta.beta - r32 * r42
    den = theta.beta * r31 - theta.sigma12 * r32
    _check_den(num, den, "lambda_41")
    return num / den


def invert_2f(theta: TwoFactorTheta) -> tuple[TwoFactorParams, bool]:
    """Structural parameters implied by ``theta`` plus a validity flag.

    Raises :class:`SingularInversionError` when ``beta rho_41 - sigma12 rho_42``
    or ``beta rho_31 - sigma12 rho_32`` vanishes.
    """
    beta, s12 = theta.beta, theta.sigma12
    if not beta > 0:
        raise DomainError(f"beta must be positive, got {beta}")
    l31 = lambda_31(theta)
    l41 = lambda_41(theta)
    l32 = (theta.rho(3, 2) - s12 * l31) / beta
    l42 = (theta.rho(4, 2) - s12 * l41) / beta
    if l31 != 0:
        s11 = (theta.rho(3, 1) - s12 * l32) / l31
    elif l41 != 0:
        s11 = (theta.rho(4, 1) - s12 * l42) / l41
    else:
        s11 = np.nan
    sigma = np.array([[s11, s12], [s12, beta]])
    p = theta.p
    lam = np.zeros((p, 2))
    lam[:2] = np.eye(2)
    lam[2] = (l31, l32)
    lam[3] = (l41, l42)
    det = s11 * beta - s12**2
    if p > 4:
        rest = np.column_stack([theta.rho1[2:], theta.rho2[2:]])
        if np.isfinite(det) and det != 0:
            lam[4:] = np.linalg.solve(sigma, rest.T).T
        else:
            lam[4:] = np.nan
    phi = theta.omega - np.einsum("ij,jk,ik->i", lam, sigma, lam)
    gamma = TwoFactorParams(lam=lam, sigma=sigma, phi=phi)
    return gamma, gamma.is_valid


def _s_pieces(theta: TwoFactorTheta):
    r = theta.rho
    c4 = r(3, 2) * r(4, 1) - theta.chi * theta.sigma12
    c3 = r(3, 1) * r(4, 2) - theta.chi * theta.sigma12
    u = {k: r(k, 2) * r(4, 1) - r(k, 1) * r(4, 2) for k in range(5, theta.p + 1)}
    v = {k: r(k, 2) * r(3, 1) - r(k, 1) * r(3, 2) for k in range(5, theta.p + 1)}
    return c3, c4, u, v


def id_strength_2f(theta: TwoFactorTheta, n: int) -> "IdStrength":
    """Identification products ``(s1, s2, s3)`` of the two-factor model.

    ``s1[k] = (rho_k2 rho_41 - rho_k1 rho_42)(rho_32 rho_41 - chi sigma12)``,
    ``s2[k] = (rho_k2 rho_31 - rho_k1 rho_32)(rho_31 rho_42 - chi sigma12)``
    for ``k = 5..p`` and ``s3[j,k] = (rho_j2 rho_41 - rho_j1 rho_42)
    (rho_k2 rho_31 - rho_k1 rho_32)`` for ``5 <= j < k``.
    """
    c3, c4, u, v = _s_pieces(theta)
    ks = range(5, theta.p + 1)
    s1 = [u[k] * c4 for k in ks]
    s2 = [v[k] * c3 for k in ks]
    s3 = [u[j] * v[k] for j, k in combinations(ks, 2)]
    return IdStrength(s=np.array(s1 + s2 + s3), n=n)


@dataclass(frozen=True)
class IdStrength:
    """Identification-strength products and their ``sqrt(n)`` scaling."""

    s: np.ndarray
    n: int
    scaled: np.ndarray = field(init=False)

    def __post_init__(self):
        s = _as_vector(self.s, "s")
        object.__setattr__(self, "s", s)
        object.__setattr__(self, "scaled", np.sqrt(self.n) * s)
