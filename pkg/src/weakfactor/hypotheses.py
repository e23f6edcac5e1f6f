"""Scalar restrictions ``r(theta) = r0`` and confidence sets by test inversion.

Each restriction is built symbolically once per ``(model, kind)`` and then
compiled to plain float functions.  When ``r`` can be solved for ``beta``
(approach A) the tested coordinate is ``r`` itself and every remaining
coordinate is a strongly identified nuisance parameter that is plugged in.
Otherwise ``r`` is solved for one strongly identified coordinate
(approach B) and ``beta`` is profiled out, which costs one extra degree of
freedom in the AR critical value.

Kinds
-----
One factor (``p >= 3``): ``FV``, ``FL<j>``, ``EV<j>``, ``StNR<j>``.
Two factors (``p >= 5``): ``FV1``, ``FV2``, ``FL<j><c>``, ``EV<j>``,
``StNR<j>``.  Loadings, error variances and signal-to-noise ratios of
variables ``j >= 5`` are handled by swapping variable ``j`` with variable
4 before testing.
"""

from __future__ import annotations

import re
import warnings as _warnings
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable

import numpy as np
import sympy as sp

from .errors import InfeasibleNullError, InvalidParameterError
from .gmm import Coordinates, ParamSpace, initial_theta
from .moments import FactorModel, MomentSystem, model_for
from .robust import TestOutcome, subvector_test

__all__ = [
    "HypothesisSpec",
    "ConfidenceInterval",
    "registry",
    "test_hypothesis",
    "ci_invert",
]

_FLAG_TOL = 1e-8


@dataclass(frozen=True, eq=False)
class HypothesisSpec:
    """A scalar restriction and the coordinates used to impose it.

    ``r_fn(x)`` and ``r_grad(x)`` act on full theta vectors.  Approach A
    specs carry ``beta_inverse(x, r0)`` (the value of ``beta`` solving the
    restriction given the other coordinates).  Approach B specs carry
    ``swap_index`` and ``swap_inverse(x, r0)`` for the strongly identified
    coordinate that is solved instead.  ``permutation`` is set when the
    restriction concerns a variable that is first moved into position 4.
    """

    factors: int
    p: int
    kind: str
    approach: str
    assumption_flags: tuple[str, ...]
    r_fn: Callable = field(repr=False)
    r_grad: Callable = field(repr=False)
    beta_inverse: Callable | None = field(default=None, repr=False)
    beta_inverse_grad: Callable | None = field(default=None, repr=False)
    swap_index: int | None = None
    swap_inverse: Callable | None = field(default=None, repr=False)
    swap_inverse_grad: Callable | None = field(default=None, repr=False)
    flag_fns: tuple = field(default=(), repr=False)
    beta_is_r: bool = False
    permutation: tuple[int, ...] | None = None
    base_kind: str | None = None

    @property
    def model(self) -> FactorModel:
        return model_for(self.p, self.factors)

    def null_coordinates(self, space: ParamSpace, r0: float, beta0: float | None = None) -> Coordinates:
        model = space.model
        if model != self.model:
            raise InvalidParameterError(f"space is for {model}, hypothesis for {self.model}")
        bi = model.beta_index
        q = model.q
        base = np.zeros(q)
        r0 = float(r0)
        if self.approach == "A":
            free = np.array([i for i in range(q) if i != bi])
            if self.beta_is_r:
                if not space.beta_min <= r0 <= space.beta_max:
                    raise InfeasibleNullError(
                        f"beta = {r0} lies outside [{space.beta_min}, {space.beta_max}]"
                    )
                base[bi] = r0
                return Coordinates(base=base, free=free)
            return Coordinates(
                base=base,
                free=free,
                solved=bi,
                solve_fn=lambda x: self.beta_inverse(x, r0),
                solve_grad=lambda x: self.beta_inverse_grad(x, r0),
            )
        c = self.swap_index
        if beta0 is None:
            free = np.array([i for i in range(q) if i != c])
        else:
            if not space.beta_min <= beta0 <= space.beta_max:
                raise InfeasibleNullError(f"beta0 = {beta0} lies outside the beta bounds")
            base[bi] = beta0
            free = np.array([i for i in range(q) if i not in (c, bi)])
        return Coordinates(
            base=base,
            free=free,
            solved=c,
            solve_fn=lambda x: self.swap_inverse(x, r0),
            solve_grad=lambda x: self.swap_inverse_grad(x, r0),
        )

    def check_assumptions(self, x) -> list[str]:
        """Declared nonzero conditions that fail numerically at ``x``."""
        out = []
        for label, fn in self.flag_fns:
            try:
                with np.errstate(all="ignore"):
                    v = float(fn(x))
            except ZeroDivisionError:
                v = np.nan
            if not np.isfinite(v) or abs(v) <= _FLAG_TOL:
                out.append(f"assumption {label} looks violated at the null estimate (value {v:.3g})")
        return out


# ---------------------------------------------------------------------------
# symbolic construction
# ---------------------------------------------------------------------------


def _symbols(model: FactorModel):
    syms = sp.symbols(" ".join(model.names), real=True)
    if not isinstance(syms, tuple):
        syms = (syms,)
    return list(syms), dict(zip(model.names, syms))


def _two_factor_pieces(s: dict):
    beta, s12, chi = s["beta"], s["sigma12"], s["chi"]
    r31, r32, r41, r42 = s["rho31"], s["rho32"], s["rho41"], s["rho42"]
    a3 = beta * r31 - s12 * r32
    a4 = beta * r41 - s12 * r42
    l31 = (chi * beta - r42 * r32) / a4
    l41 = (chi * beta - r32 * r42) / a3
    l32 = sp.cancel((r32 - s12 * l31) / beta)
    l42 = sp.cancel((r42 - s12 * l41) / beta)
    sig1 = sp.cancel((r31 - s12 * l32) / l31)
    return {"l31": l31, "l41": l41, "l32": l32, "l42": l42, "sig1": sig1}


_KIND_RE = re.compile(r"^(FV|FL|EV|StNR)(\d*)$")


def _parse(kind: str):
    m = _KIND_RE.match(kind)
    if not m:
        raise InvalidParameterError(f"unknown hypothesis kind {kind!r}")
    return m.group(1), m.group(2)


def _one_factor(p: int, head: str, digits: str, s: dict):
    beta = s["beta"]
    if head == "FV":
        if digits:
            raise InvalidParameterError("one-factor FV takes no index")
        return beta, (), None
    if not digits:
        raise InvalidParameterError(f"{head} needs a variable index")
    j = int(digits)
    if not 1 <= j <= p or (head == "FL" and j == 1):
        raise InvalidParameterError(f"{head}{j} is not defined for p={p}")
    om = s[f"omega{j}"]
    if j == 1:
        expr = om - beta if head == "EV" else beta / (om - beta)
        return expr, (), None
    rho = s[f"rho{j}"]
    flags = ((f"lambda_{j} != 0", rho / beta),)
    if head == "FL":
        return rho / beta, flags, f"rho{j}"
    if head == "EV":
        return om - rho**2 / beta, flags, f"omega{j}"
    return rho**2 / (beta * om - rho**2), flags, f"omega{j}"


def _two_factor(head: str, digits: str, s: dict):
    pc = _two_factor_pieces(s)
    beta = s["beta"]
    r31, r32, r41, r42 = s["rho31"], s["rho32"], s["rho41"], s["rho42"]
    f_l32 = ("lambda_32 != 0", pc["l32"])
    f_l42 = ("lambda_42 != 0", pc["l42"])
    if head == "FV":
        if digits == "1":
            return pc["sig1"], (f_l32, f_l42), "chi"
        if digits == "2":
            return beta, (), None
        raise InvalidParameterError("two-factor FV index must be 1 or 2")
    if head == "FL":
        table = {
            "31": (pc["l31"], (("rho_42 != 0", r42), f_l32), "chi"),
            "41": (pc["l41"], (("rho_32 != 0", r32), f_l42), "chi"),
            "32": (pc["l32"], (("rho_41 != 0", r41), f_l32), "rho32"),
            "42": (pc["l42"], (("rho_31 != 0", r31), f_l42), "rho42"),
        }
        if digits not in table:
            raise InvalidParameterError(f"FL{digits} is not a direct two-factor loading hypothesis")
        return table[digits]
    j = int(digits) if digits else 0
    om = s.get(f"omega{j}")
    if j == 1:
        common = pc["sig1"]
        flags = (f_l32, f_l42)
    elif j == 2:
        common = beta
        flags = ()
    elif j == 3:
        common = r31 * pc["l31"] + r32 * pc["l32"]
        flags = (("rho_41 rho_32 - rho_42 rho_31 != 0", r41 * r32 - r42 * r31), f_l32)
    elif j == 4:
        common = r41 * pc["l41"] + r42 * pc["l42"]
        flags = (("rho_31 rho_42 - rho_32 rho_41 != 0", r31 * r42 - r32 * r41), f_l42)
    else:
        raise InvalidParameterError(f"{head}{digits} is not defined")
    expr = om - common if head == "EV" else common / (om - common)
    swap = None if j == 2 else f"omega{j}"
    return expr, flags, swap


def _lambdify_scalar(args, expr):
    return sp.lambdify(args, expr, modules="math")


def _lambdify_grad(args, expr, syms):
    fn = sp.lambdify(args, [sp.diff(expr, v) for v in syms], modules="math")
    return lambda *a: np.array(fn(*a), dtype=float)


def _unique_solution(expr, target, var):
    sols = sp.solve(sp.Eq(expr, target), var, dict=False)
    sols = [sp.cancel(x) for x in sols]
    if len(sols) != 1:
        raise InvalidParameterError(f"restriction does not have a unique solution for {var}")
    return sols[0]


@lru_cache(maxsize=None)
def _build(factors: int, p: int, kind: str, assume: bool) -> HypothesisSpec:
    model = model_for(p, factors)
    syms, s = _symbols(model)
    head, digits = _parse(kind)
    if factors == 1:
        expr, flags, swap_name = _one_factor(p, head, digits, s)
    elif factors == 2:
        expr, flags, swap_name = _two_factor(head, digits, s)
    else:
        raise InvalidParameterError("hypotheses are defined for one- and two-factor models")
    r0 = sp.Symbol("r0", real=True)
    beta = s["beta"]
    r_fn = _lambdify_scalar([syms], expr)
    r_grad = _lambdify_grad([syms], expr, syms)
    flag_fns = tuple((label, _lambdify_scalar([syms], e)) for label, e in flags)
    beta_is_r = expr == beta
    common = dict(
        factors=factors,
        p=p,
        kind=kind,
        assumption_flags=tuple(label for label, _ in flags),
        r_fn=r_fn,
        r_grad=r_grad,
        flag_fns=flag_fns,
        beta_is_r=bool(beta_is_r),
    )
    if assume or swap_name is None:
        sol = _unique_solution(expr, r0, beta)
        return HypothesisSpec(
            approach="A",
            beta_inverse=_lambdify_scalar([syms, r0], sol),
            beta_inverse_grad=_lambdify_grad([syms, r0], sol, syms),
            **common,
        )
    var = s[swap_name]
    sol = _unique_solution(expr, r0, var)
    return HypothesisSpec(
        approach="B",
        swap_index=model.names.index(swap_name),
        swap_inverse=_lambdify_scalar([syms, r0], sol),
        swap_inverse_grad=_lambdify_grad([syms, r0], sol, syms),
        **common,
    )


def registry(factors: int, p: int, kind: str, assume: bool = True) -> HypothesisSpec:
    """Restriction ``kind`` for a ``factors``-factor model with ``p`` variables.

    ``assume=True`` adopts the nonzero conditions listed in
    ``assumption_flags`` so that ``r`` can be solved for ``beta``.  With
    ``assume=False`` the restriction is solved for a strongly identified
    coordinate instead whenever such conditions would be needed.
    """
    if factors not in (1, 2):
        raise InvalidParameterError("hypotheses are defined for one- and two-factor models")
    model_for(p, factors)  # validates p
    head, digits = _parse(kind)
    if factors == 2 and digits:
        j = int(digits[0]) if head == "FL" else int(digits)
        if head == "FL" and len(digits) != 2:
            raise InvalidParameterError("two-factor loading kinds look like FL31")
        if j > p:
            raise InvalidParameterError(f"variable {j} does not exist for p={p}")
        if j >= 5:
            perm = list(range(p))
            perm[3], perm[j - 1] = perm[j - 1], perm[3]
            base_kind = head + ("4" + digits[1] if head == "FL" else "4")
            spec = _build(2, p, base_kind, assume)
            return HypothesisSpec(
                **{**spec.__dict__, "kind": kind, "permutation": tuple(perm), "base_kind": base_kind}
            )
    return _build(factors, p, kind, assume)


# ---------------------------------------------------------------------------
# testing and confidence sets
# ---------------------------------------------------------------------------


def _prepare(spec: HypothesisSpec, ms: MomentSystem) -> MomentSystem:
    if spec.p != ms.p:
        raise InvalidParameterError(f"hypothesis is for p={spec.p} but data have p={ms.p}")
    return ms.permuted(spec.permutation) if spec.permutation is not None else ms


def test_hypothesis(
    spec: HypothesisSpec,
    r0: float,
    ms: MomentSystem,
    space: ParamSpace,
    method: str = "AR-Plug",
    alpha: float = 0.05,
) -> TestOutcome:
    """Test ``r(theta) = r0`` with a plug-in or projected method.

    The result is a deterministic function of its arguments.  Declared
    assumptions that fail numerically at the null estimate are reported in
    ``warnings``; they never change the decision.
    """
    data = _prepare(spec, ms)
    out = subvector_test(method, spec, r0, data, space, alpha)
    fit = out.details["fit"]
    notes = spec.check_assumptions(fit.x)
    if spec.approach == "A" and not spec.beta_is_r:
        b = fit.x[space.model.beta_index]
        if not space.beta_min <= b <= space.beta_max:
            notes.append(f"implied beta {b:.4g} lies outside [{space.beta_min}, {space.beta_max}]")
    if not fit.converged:
        notes.append("null-restricted minimization did not converge")
    if notes:
        out = TestOutcome(
            out.statistic, out.critical_value, out.reject, out.alpha, out.method,
            df=out.df, rk=out.rk, warnings=tuple(notes), details=out.details,
        )
    return out


@dataclass(frozen=True)
class ConfidenceInterval:
    """Set of ``r0`` values not rejected, reported as a union of intervals.

    ``hull`` is the smallest interval containing every accepted piece.
    ``truncated_low``/``truncated_high`` flag acceptance at the ends of the
    searched range, where the true set may extend further.
    """

    grid: np.ndarray
    accepted: np.ndarray
    intervals: tuple[tuple[float, float], ...]
    method: str
    alpha: float
    truncated_low: bool = False
    truncated_high: bool = False

    @property
    def empty(self) -> bool:
        return len(self.intervals) == 0

    @property
    def length(self) -> float:
        return float(sum(hi - lo for lo, hi in self.intervals))

    @property
    def hull(self) -> tuple[float, float] | None:
        if self.empty:
            return None
        return (self.intervals[0][0], self.intervals[-1][1])

    @property
    def disconnected(self) -> bool:
        return len(self.intervals) > 1

    def render(self, digits: int = 2) -> str:
        if self.empty:
            return "∅ (all grid points rejected)"
        parts = []
        for i, (lo, hi) in enumerate(self.intervals):
            left = "(" if i == 0 and self.truncated_low else "["
            right = ")" if i == len(self.intervals) - 1 and self.truncated_high else "]"
            parts.append(f"{left}{lo:.{digits}f}, {hi:.{digits}f}{right}")
        text = " ∪ ".join(parts)
        if self.truncated_low or self.truncated_high:
            text += " (truncated at search bound)"
        return text


def default_range(spec: HypothesisSpec, ms: MomentSystem, space: ParamSpace) -> tuple[float, float]:
    """Range of ``r`` as ``beta`` sweeps its bounds with the strongly
    identified block at its sample-moment value."""
    if spec.beta_is_r:
        return (space.beta_min, space.beta_max)
    data = _prepare(spec, ms)
    x = initial_theta(data, space)
    bi = space.model.beta_index
    vals = []
    for b in np.geomspace(space.beta_min, space.beta_max, 401):
        x[bi] = b
        try:
            with np.errstate(all="ignore"):
                v = float(spec.r_fn(x))
        except ZeroDivisionError:
            continue
        if np.isfinite(v):
            vals.append(v)
    if not vals:
        raise InfeasibleNullError("restriction is undefined across the beta bounds")
    lo, hi = min(vals), max(vals)
    if hi - lo < 1e-8:
        pad = max(1.0, abs(lo))
        lo, hi = lo - pad, hi + pad
    return (lo, hi)


def ci_invert(
    spec: HypothesisSpec,
    ms: MomentSystem,
    space: ParamSpace,
    method: str = "AR-Plug",
    alpha: float = 0.05,
    grid=None,
    n_grid: int = 200,
    r_range: tuple[float, float] | None = None,
    refine: bool = True,
) -> ConfidenceInterval:
    """Invert ``test_hypothesis`` over a grid of ``r0`` values.

    Each accept/reject boundary between neighbouring grid points is refined
    by bisection to a resolution of 1e-3 of the grid span.  Infeasible
    values count as rejected.
    """
    if grid is None:
        lo, hi = r_range if r_range is not None else default_range(spec, ms, space)
        if n_grid < 50:
            raise InvalidParameterError("the grid needs at least 50 points")
        grid = np.linspace(lo, hi, n_grid)
    grid = np.sort(np.asarray(grid, dtype=float))
    span = grid[-1] - grid[0]

    def accept(r0: float) -> bool:
        try:
            return not test_hypothesis(spec, r0, ms, space, method, alpha).reject
        except InfeasibleNullError:
            return False

    with _warnings.catch_warnings():
        _warnings.simplefilter("ignore", RuntimeWarning)
        acc = np.array([accept(r) for r in grid])

        def boundary(rej: float, ok: float) -> float:
            if not refine:
                return ok
            tol = 1e-3 * span
            while abs(ok - rej) > tol:
                mid = 0.5 * (ok + rej)
                if accept(mid):
                    ok = mid
                else:
                    rej = mid
            return 0.5 * (ok + rej)

        intervals = []
        i = 0
        n = grid.size
        while i < n:
            if not acc[i]:
                i += 1
                continue
            j = i
            while j + 1 < n and acc[j + 1]:
                j += 1
            left = grid[0] if i == 0 else boundary(grid[i - 1], grid[i])
            right = grid[-1] if j == n - 1 else boundary(grid[j + 1], grid[j])
            intervals.append((float(left), float(right)))
            i = j + 1
    return ConfidenceInterval(
        grid=grid,
        accepted=acc,
        intervals=tuple(intervals),
        method=method,
        alpha=alpha,
        truncated_low=bool(acc[0]),
        truncated_high=bool(acc[-1]),
    )


test_hypothesis.__test__ = False  # keep pytest from collecting the public API
