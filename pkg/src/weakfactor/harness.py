"""Simulation designs, the Monte Carlo driver, data ingestion and reports."""

from __future__ import annotations

import csv
import io
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    DataValidationError,
    InvalidParameterError,
    ReplicationFailureError,
    SingularWeightError,
    WeakFactorError,
)
from .gmm import ParamSpace
from .hypotheses import ConfidenceInterval, ci_invert, registry, test_hypothesis
from .model_core import OneFactorParams, TwoFactorParams, omega_of_gamma
from .moments import MomentSystem, model_for, vhat
from .selection import SelectionReport, select_factors

__all__ = [
    "VARIANTS",
    "DgpSpec",
    "simulate",
    "Cell",
    "McReport",
    "run_mc",
    "read_table",
    "ingest",
    "report",
    "default_workers",
    "write_table",
]

VARIANTS = ("1F-spec1", "1F-spec2", "2F-spec1", "2F-spec2", "2F-spec3")
TEST_NAMES = ("AR-Plug", "K-Plug", "CLR-Plug", "AR-Proj")
SELECTION_NAMES = ("AIC", "BIC", "J")
MAX_FAILURE_RATE = 0.02


@dataclass(frozen=True)
class DgpSpec:
    """Simulation design with local drift constants.

    One factor uses ``sigma^2 = 1`` and unit error variances with loadings
    ``(1, 1, b/sqrt(n))`` (spec1) or ``(1, c, c)`` with
    ``c = n^{-1/4} sqrt(b)`` (spec2).  Two factors use ``Sigma = I`` and unit
    error variances; rows 3 to 5 of the loading matrix are

    * spec1: ``(1, b1/sqrt(n)), (1, b2/sqrt(n)), (0, 1)``
    * spec2: ``(1, 1 - b2/sqrt(n)), (1, 1 - b1/sqrt(n)), (1, 1)``
    * spec3: ``(1, d sqrt(b1)), (1, d b2/sqrt(b1)), (0, d sqrt(b1))`` with
      ``d = n^{-1/4}`` and the middle entry set to 0 when ``b1 = 0``.
    """

    variant: str
    n: int = 500
    b: float = 0.0
    b1: float = 0.0
    b2: float = 0.0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise InvalidParameterError(f"unknown variant {self.variant!r}; choose from {VARIANTS}")
        if self.n < 2:
            raise InvalidParameterError("n must be at least 2")
        if min(self.b, self.b1, self.b2) < 0:
            raise InvalidParameterError("drift constants must be nonnegative")

    @property
    def factors(self) -> int:
        return int(self.variant[0])

    @property
    def p(self) -> int:
        return 3 if self.factors == 1 else 5

    @property
    def drift(self) -> float | tuple[float, float]:
        return self.b if self.factors == 1 else (self.b1, self.b2)

    def gamma(self) -> OneFactorParams | TwoFactorParams:
        n = self.n
        if self.factors == 1:
            if self.variant == "1F-spec1":
                lam = [1.0, 1.0, self.b / np.sqrt(n)]
            else:
                c = n**-0.25 * np.sqrt(self.b)
                lam = [1.0, c, c]
            return OneFactorParams(lam=lam, sigma2=1.0, phi=np.ones(3))
        rn = np.sqrt(n)
        if self.variant == "2F-spec1":
            rows = [(1.0, self.b1 / rn), (1.0, self.b2 / rn), (0.0, 1.0)]
        elif self.variant == "2F-spec2":
            rows = [(1.0, 1 - self.b2 / rn), (1.0, 1 - self.b1 / rn), (1.0, 1.0)]
        else:
            d = n**-0.25
            mid = d * self.b2 / np.sqrt(self.b1) if self.b1 > 0 else 0.0
            rows = [(1.0, d * np.sqrt(self.b1)), (1.0, mid), (0.0, d * np.sqrt(self.b1))]
        lam = np.vstack([np.eye(2), rows])
        return TwoFactorParams(lam=lam, sigma=np.eye(2), phi=np.ones(5))

    def omega(self) -> np.ndarray:
        return omega_of_gamma(self.gamma())


def simulate(dgp: DgpSpec, seed) -> np.ndarray:
    """``n x p`` draw of ``W = F Lambda' + E`` with Gaussian factors and errors."""
    rng = np.random.default_rng(seed)
    gamma = dgp.gamma()
    if dgp.factors == 1:
        f = np.sqrt(gamma.sigma2) * rng.standard_normal((dgp.n, 1))
        lam = gamma.lam[:, None]
    else:
        f = rng.standard_normal((dgp.n, 2)) @ np.linalg.cholesky(gamma.sigma).T
        lam = gamma.lam
    e = rng.standard_normal((dgp.n, dgp.p)) * np.sqrt(gamma.phi)
    return f @ lam.T + e


# ---------------------------------------------------------------------------
# Monte Carlo
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Cell:
    """Rejection (or selection) percentage with its Monte Carlo standard error."""

    percent: float
    se: float
    count: int
    failures: int
    seconds: float

    @classmethod
    def from_hits(cls, hits: int, count: int, failures: int, seconds: float) -> "Cell":
        if count == 0:
            return cls(float("nan"), float("nan"), 0, failures, seconds)
        phat = hits / count
        return cls(100.0 * phat, 100.0 * np.sqrt(phat * (1 - phat) / count), count, failures, seconds)


@dataclass(frozen=True)
class McReport:
    dgp: DgpSpec
    B: int
    alpha: float
    seed: int
    cells: dict = field(default_factory=dict)
    ave_len: float | None = None
    ave_len_se: float | None = None
    len_failures: int = 0
    kind: str = ""
    r0: float = 1.5


def default_workers() -> int:
    try:
        return max(1, int(os.environ.get("WEAKFACTOR_WORKERS", "1")))
    except ValueError:
        return 1


def _default_hypothesis(dgp: DgpSpec) -> str:
    return "FV" if dgp.factors == 1 else "FV2"


def _replication(args) -> dict:
    dgp, rep, seed, tests, alpha, kind, r0, beta_max, starts = args
    data = simulate(dgp, np.random.SeedSequence([seed, rep]))
    out: dict = {}
    t0 = time.perf_counter()
    try:
        ms = vhat(data)
    except WeakFactorError:
        return {name: None for name in tests}
    model = model_for(dgp.p, dgp.factors)
    space = ParamSpace.default(model, beta_max=beta_max)
    spec = registry(dgp.factors, dgp.p, kind) if any(t in TEST_NAMES or t == "CI" for t in tests) else None
    for name in tests:
        t0 = time.perf_counter()
        try:
            if name in TEST_NAMES:
                res = test_hypothesis(spec, r0, ms, space, name, alpha)
                value = None if "null-restricted minimization did not converge" in res.warnings else res.reject
            elif name == "CI":
                value = ci_invert(spec, ms, space, "AR-Plug", alpha).length
            elif name in SELECTION_NAMES:
                value = out.get("_selection")
                if value is None:
                    value = select_factors(ms, starts=starts, seed=rep)
                    out["_selection"] = value
                value = _selection_hit(value, name, dgp, alpha)
            else:
                raise InvalidParameterError(f"unknown test {name!r}")
        except (WeakFactorError, ArithmeticError, ValueError):
            value = None
        out[name] = value
        out[f"_t_{name}"] = time.perf_counter() - t0
    out.pop("_selection", None)
    return out


def _selection_hit(rep: SelectionReport, name: str, dgp: DgpSpec, alpha: float) -> bool:
    """True when the criterion detects the larger model (or the J test rejects the smaller)."""
    larger = dgp.factors
    if name == "AIC":
        return rep.chosen_aic == larger
    if name == "BIC":
        return rep.chosen_bic == larger
    pval = rep.by_factors(larger - 1).j_pvalue
    return pval is not None and pval < alpha


def run_mc(
    dgp: DgpSpec,
    tests,
    B: int,
    seed: int,
    alpha: float = 0.05,
    workers: int | None = None,
    kind: str | None = None,
    r0: float = 1.5,
    beta_max: float = 10.0,
    starts: int = 10,
    min_B: int = 100,
) -> McReport:
    """Monte Carlo rejection frequencies for ``tests`` under ``dgp``.

    ``tests`` may contain ``AR-Plug``, ``K-Plug``, ``CLR-Plug``, ``AR-Proj``,
    ``CI`` (average length of the AR-Plug confidence interval) and the
    selection rows ``AIC``, ``BIC``, ``J``.  Replication ``r`` uses the seed
    sequence ``(seed, r)``, so results do not depend on ``workers``.
    Replications whose computation fails are excluded and counted; more
    than 2% failures for any row raises :class:`ReplicationFailureError`.
    """
    if B < min_B:
        raise InvalidParameterError(f"B must be at least {min_B}")
    tests = tuple(tests)
    kind = kind or _default_hypothesis(dgp)
    workers = default_workers() if workers is None else max(1, int(workers))
    jobs = [(dgp, rep, int(seed), tests, alpha, kind, r0, beta_max, starts) for rep in range(B)]
    if workers == 1:
        results = [_replication(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_replication, jobs, chunksize=max(1, B // (4 * workers))))
    cells = {}
    ave_len = ave_se = None
    len_fail = 0
    for name in tests:
        vals = [r.get(name) for r in results]
        ok = [v for v in vals if v is not None]
        failures = B - len(ok)
        if failures > MAX_FAILURE_RATE * B:
            raise ReplicationFailureError(f"{failures} of {B} replications failed for {name}")
        secs = float(np.mean([r.get(f"_t_{name}", 0.0) for r in results]))
        if name == "CI":
            arr = np.asarray(ok, dtype=float)
            ave_len = float(arr.mean())
            ave_se = float(arr.std(ddof=1) / np.sqrt(arr.size)) if arr.size > 1 else float("nan")
            len_fail = failures
            continue
        cells[name] = Cell.from_hits(int(sum(bool(v) for v in ok)), len(ok), failures, secs)
    return McReport(
        dgp=dgp, B=B, alpha=alpha, seed=int(seed), cells=cells,
        ave_len=ave_len, ave_len_se=ave_se, len_failures=len_fail, kind=kind, r0=r0,
    )


# ---------------------------------------------------------------------------
# data input
# ---------------------------------------------------------------------------


def read_table(path) -> tuple[list[str], np.ndarray]:
    """Read a comma- or tab-separated numeric table with a header row."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise DataValidationError(f"cannot read {path}: {exc}") from exc
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if len(lines) < 2:
        raise DataValidationError(f"{path}: need a header row and at least one data row")
    delim = "\t" if lines[0].count("\t") > lines[0].count(",") else ","
    reader = csv.reader(io.StringIO("\n".join(lines)), delimiter=delim)
    rows = list(reader)
    header = [h.strip() for h in rows[0]]
    p = len(header)
    data = np.empty((len(rows) - 1, p))
    for i, row in enumerate(rows[1:], start=2):
        if len(row) != p:
            raise DataValidationError(f"{path}: line {i} has {len(row)} fields, expected {p}")
        for j, cell in enumerate(row):
            cell = cell.strip()
            if cell == "" or cell.lower() in ("na", "nan", "null"):
                raise DataValidationError(f"{path}: missing value at line {i}, column {header[j]!r}")
            try:
                data[i - 2, j] = float(cell)
            except ValueError:
                raise DataValidationError(
                    f"{path}: non-numeric value {cell!r} at line {i}, column {header[j]!r}"
                ) from None
    if not np.all(np.isfinite(data)):
        raise DataValidationError(f"{path}: non-finite values present")
    return header, data


def ingest(path) -> MomentSystem:
    """Moment system of the demeaned columns of a delimited file."""
    header, data = read_table(path)
    n, p = data.shape
    k = p * (p + 1) // 2
    if n <= k:
        raise DataValidationError(f"{path}: need more than {k} rows for {p} variables, got {n}")
    data = data - data.mean(axis=0)
    const = [header[j] for j in range(p) if np.ptp(data[:, j]) == 0]
    if const:
        raise SingularWeightError(f"constant column(s) make the weight matrix singular: {', '.join(const)}")
    return vhat(data)


def write_table(path, data, header=None) -> None:
    data = np.asarray(data, dtype=float)
    header = header or [f"W{j + 1}" for j in range(data.shape[1])]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in data:
            w.writerow([repr(float(v)) for v in row])


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------


def _fmt4(v) -> str:
    return "" if v is None else f"{float(v):.4g}"


def _drift_label(dgp: DgpSpec) -> str:
    if dgp.factors == 1:
        return f"b={dgp.b:g}"
    return f"b1={dgp.b1:g}" + (f",b2={dgp.b2:g}" if dgp.b2 else "")


def _mc_rows(reports: list[McReport]):
    names = []
    for rep in reports:
        for name in rep.cells:
            if name not in names:
                names.append(name)
    return names


def report(obj, sink=None, fmt: str = "both") -> str:
    """Render a report object.

    ``obj`` is an :class:`McReport`, a list of them (one column per drift
    value), a :class:`SelectionReport` or a :class:`ConfidenceInterval`.
    ``sink`` is a path prefix: ``<prefix>.csv`` receives machine-readable
    cells and ``<prefix>.md`` the aligned table.  The markdown text is
    returned in any case.
    """
    if isinstance(obj, McReport):
        obj = [obj]
    if isinstance(obj, list) and obj and all(isinstance(r, McReport) for r in obj):
        cells_rows, md = _render_mc(obj)
    elif isinstance(obj, SelectionReport):
        cells_rows, md = _render_selection(obj)
    elif isinstance(obj, ConfidenceInterval):
        cells_rows, md = _render_ci(obj)
    else:
        raise InvalidParameterError(f"cannot render {type(obj).__name__}")
    if sink is not None:
        prefix = Path(sink)
        try:
            if fmt in ("both", "csv"):
                with open(prefix.with_suffix(".csv"), "w", newline="", encoding="utf-8") as fh:
                    csv.writer(fh).writerows(cells_rows)
            if fmt in ("both", "md"):
                prefix.with_suffix(".md").write_text(md, encoding="utf-8")
        except OSError as exc:
            raise DataValidationError(f"cannot write report to {prefix}: {exc}") from exc
    return md


def _md_table(header: list[str], rows: list[list[str]]) -> str:
    widths = [max(len(h), *(len(r[i]) for r in rows)) if rows else len(h) for i, h in enumerate(header)]
    fmt_row = lambda r: "| " + " | ".join(c.ljust(w) for c, w in zip(r, widths)) + " |"
    lines = [fmt_row(header), "|" + "|".join("-" * (w + 2) for w in widths) + "|"]
    lines += [fmt_row(r) for r in rows]
    return "\n".join(lines)


def _render_mc(reports: list[McReport]):
    names = _mc_rows(reports)
    labels = [_drift_label(r.dgp) for r in reports]
    # wall time stays out of the machine-readable cells so reruns are byte-identical
    cells = [["test", "column", "percent", "mc_se", "count", "failures"]]
    rows = []
    for name in names:
        row = [name]
        for rep, lab in zip(reports, labels):
            c = rep.cells.get(name)
            if c is None:
                row.append("")
                continue
            row.append(f"{c.percent:.1f}")
            cells.append([name, lab, _fmt4(c.percent), _fmt4(c.se), str(c.count), str(c.failures)])
        rows.append(row)
    if any(r.ave_len is not None for r in reports):
        row = ["Ave. Len."]
        for rep, lab in zip(reports, labels):
            if rep.ave_len is None:
                row.append("")
                continue
            row.append(f"{rep.ave_len:.1f}")
            cells.append(["Ave. Len.", lab, _fmt4(rep.ave_len), _fmt4(rep.ave_len_se), "", str(rep.len_failures)])
        rows.append(row)
    first = reports[0]
    md = _md_table(["Test"] + labels, rows)
    ses, times = [], []
    for name in names:
        vals = [rep.cells[name] for rep in reports if name in rep.cells]
        if vals:
            ses.append(f"{name} {max(c.se for c in vals):.2f}")
            times.append(f"{name} {1e3 * np.mean([c.seconds for c in vals]):.1f}")
    footer = (
        f"\n\nVariant {first.dgp.variant}, n={first.dgp.n}, B={first.B}, alpha={first.alpha}, "
        f"H0: {first.kind} = {first.r0:g}, seed={first.seed} (replication r uses seed sequence (seed, r)).\n"
        f"Largest Monte Carlo SE per row (pp): {'; '.join(ses) if ses else 'n/a'}.\n"
        f"Mean wall time per replication (ms): {'; '.join(times) if times else 'n/a'}.\n"
    )
    return cells, md + footer


def _render_selection(rep: SelectionReport):
    cells = [["factors", "J", "k", "q", "aic", "bic", "j_pvalue"]]
    rows = []
    for m in rep.models:
        cells.append([str(m.factors), _fmt4(m.qmin), str(m.k), str(m.q), _fmt4(m.aic), _fmt4(m.bic), _fmt4(m.j_pvalue)])
        rows.append([
            str(m.factors), f"{m.qmin:.2f}", str(m.k), str(m.q), f"{m.aic:.2f}", f"{m.bic:.2f}",
            "n/a (just identified)" if m.j_pvalue is None else f"{m.j_pvalue:.4f}",
        ])
    md = _md_table(["Factors", "J", "k", "q", "AIC", "BIC", "J p-value"], rows)
    md += f"\n\nAIC chooses {rep.chosen_aic} factor(s); BIC chooses {rep.chosen_bic} factor(s); n={rep.n}.\n"
    return cells, md


def _render_ci(ci: ConfidenceInterval):
    cells = [["lower", "upper"]] + [[_fmt4(lo), _fmt4(hi)] for lo, hi in ci.intervals]
    md = (
        f"{100 * (1 - ci.alpha):.0f}% {ci.method} confidence set: {ci.render()}\n"
        f"Length {ci.length:.2f}; grid of {ci.grid.size} points on "
        f"[{ci.grid[0]:.2f}, {ci.grid[-1]:.2f}]"
        + ("; disconnected" if ci.disconnected else "")
        + "\n"
    )
    return cells, md
