"""Command-line interface.

Exit codes: 0 on success, 2 on invalid input, 3 when a Monte Carlo run has
too many failed replications.
"""

from __future__ import annotations

import argparse
import configparser
import sys

import numpy as np

from .errors import ReplicationFailureError, WeakFactorError
from .gmm import ParamSpace, minimize_full
from .harness import VARIANTS, DgpSpec, ingest, report, run_mc, simulate, write_table
from .hypotheses import ci_invert, registry, test_hypothesis
from .moments import model_for
from .robust import METHODS, j_test
from .selection import select_factors

EXIT_OK = 0
EXIT_INVALID = 2
EXIT_REPLICATION = 3
CONFIG_SECTION = "weakfactor"


class _ArgumentError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on its own; raising keeps exit handling in one place
    def error(self, message):
        raise _ArgumentError(f"{self.prog}: error: {message}")


def _add_space(p: argparse.ArgumentParser) -> None:
    p.add_argument("--beta-min", type=float, default=0.01, help="lower bound for beta (default 0.01)")
    p.add_argument("--beta-max", type=float, default=10.0, help="upper bound for beta (default 10)")


def _add_data(p: argparse.ArgumentParser) -> None:
    p.add_argument("data", help="comma- or tab-separated file with a header row")
    p.add_argument("--factors", type=int, choices=(1, 2), default=1)
    _add_space(p)


def _add_hypothesis(p: argparse.ArgumentParser) -> None:
    p.add_argument(
        "--hypothesis", default=None,
        help="restriction kind: FV, FL<j>, EV<j>, StNR<j> (one factor) or FV1, FV2, FL31, ... (two factors); "
        "defaults to FV or FV2",
    )
    p.add_argument("--method", choices=METHODS, default="AR-Plug")
    p.add_argument("--alpha", type=float, default=0.05)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="weakfactor", description="Identification-robust inference in small factor models.")
    parser.add_argument("--config", help="INI file whose [weakfactor] section supplies option defaults")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("simulate", help="draw a data set from a simulation design")
    p.add_argument("--variant", choices=VARIANTS, default="1F-spec1")
    p.add_argument("--n", type=int, default=500)
    p.add_argument("--b", type=float, default=0.0)
    p.add_argument("--b1", type=float, default=0.0)
    p.add_argument("--b2", type=float, default=0.0)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True, help="output CSV path")

    p = sub.add_parser("mc", help="Monte Carlo rejection and selection frequencies")
    p.add_argument("--variant", choices=VARIANTS, default="1F-spec1")
    p.add_argument("--n", type=int, default=500)
    p.add_argument("--b", type=float, nargs="+", default=[0.0], help="drift values, one table column each")
    p.add_argument("--b2", type=float, default=0.0, help="second drift constant for two-factor designs")
    p.add_argument("--tests", nargs="+", default=["AR-Plug"],
                   help="any of AR-Plug K-Plug CLR-Plug AR-Proj CI AIC BIC J")
    p.add_argument("--B", type=int, default=1000, dest="B")
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--workers", type=int, default=None, help="worker processes (default WEAKFACTOR_WORKERS or 1)")
    p.add_argument("--hypothesis", default=None)
    p.add_argument("--r0", type=float, default=1.5)
    p.add_argument("--beta-max", type=float, default=10.0)
    p.add_argument("--out", default=None, help="path prefix for .csv and .md outputs")

    p = sub.add_parser("test", help="test a restriction on a data set")
    _add_data(p)
    _add_hypothesis(p)
    p.add_argument("--r0", type=float, required=True)

    p = sub.add_parser("ci", help="confidence set by test inversion")
    _add_data(p)
    _add_hypothesis(p)
    p.add_argument("--lower", type=float, default=None)
    p.add_argument("--upper", type=float, default=None)
    p.add_argument("--grid", type=int, default=200)
    p.add_argument("--out", default=None)

    p = sub.add_parser("select", help="choose the number of factors")
    p.add_argument("data")
    p.add_argument("--candidates", type=int, nargs="+", default=None)
    p.add_argument("--starts", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    _add_space(p)
    p.add_argument("--out", default=None)

    p = sub.add_parser("fit", help="unrestricted GMM fit and J test")
    _add_data(p)
    p.add_argument("--starts", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    return parser


def _subparser(parser: argparse.ArgumentParser, name: str) -> argparse.ArgumentParser:
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[name]
    raise KeyError(name)


def _apply_config(parser: argparse.ArgumentParser, command: str, path: str) -> None:
    """Use ``key = value`` pairs from the config file as option defaults."""
    cfg = configparser.ConfigParser()
    cfg.optionxform = str  # option names are case sensitive (B vs b)
    try:
        with open(path, encoding="utf-8") as fh:
            cfg.read_file(fh)
    except (OSError, configparser.Error) as exc:
        raise _ArgumentError(f"cannot read config {path}: {exc}") from exc
    sections = [s for s in (CONFIG_SECTION, f"{CONFIG_SECTION}.{command}") if cfg.has_section(s)]
    sp = _subparser(parser, command)
    actions = {a.dest: a for a in sp._actions}
    defaults = {}
    for section in sections:
        for key, raw in cfg.items(section):
            dest = key.replace("-", "_")
            action = actions.get(dest)
            if action is None:
                raise _ArgumentError(f"config {path}: unknown option {key!r} for {command}")
            conv = action.type or str
            try:
                if action.nargs in ("+", "*"):
                    value = [conv(v) for v in raw.replace(",", " ").split()]
                else:
                    value = conv(raw.strip())
            except ValueError as exc:
                raise _ArgumentError(f"config {path}: bad value for {key!r}: {raw!r}") from exc
            if action.choices is not None and value not in action.choices:
                raise _ArgumentError(f"config {path}: {key} must be one of {list(action.choices)}")
            defaults[dest] = value
            action.required = False
    sp.set_defaults(**defaults)


def _space(args, factors: int, p: int) -> ParamSpace:
    return ParamSpace.default(model_for(p, factors), args.beta_min, args.beta_max)


def _kind(args) -> str:
    return args.hypothesis or ("FV" if args.factors == 1 else "FV2")


def _cmd_simulate(args) -> int:
    dgp = DgpSpec(args.variant, n=args.n, b=args.b, b1=args.b1, b2=args.b2)
    write_table(args.out, simulate(dgp, args.seed))
    print(f"wrote {dgp.n} x {dgp.p} draws to {args.out}")
    return EXIT_OK


def _cmd_mc(args) -> int:
    reports = []
    for b in args.b:
        if args.variant.startswith("1F"):
            dgp = DgpSpec(args.variant, n=args.n, b=b)
        else:
            dgp = DgpSpec(args.variant, n=args.n, b1=b, b2=args.b2)
        reports.append(run_mc(
            dgp, args.tests, B=args.B, seed=args.seed, alpha=args.alpha, workers=args.workers,
            kind=args.hypothesis, r0=args.r0, beta_max=args.beta_max,
        ))
    print(report(reports, args.out))
    return EXIT_OK


def _cmd_test(args) -> int:
    ms = ingest(args.data)
    spec = registry(args.factors, ms.p, _kind(args))
    out = test_hypothesis(spec, args.r0, ms, _space(args, args.factors, ms.p), args.method, args.alpha)
    print(f"H0: {_kind(args)} = {args.r0:g}  method {out.method}")
    print(f"statistic {out.statistic:.4f}  critical value {out.critical_value:.4f}  "
          f"{'reject' if out.reject else 'do not reject'} at {args.alpha:g}")
    if out.df is not None:
        print(f"df {out.df:g}" + (f"  rk {out.rk:.4f}" if out.rk is not None else ""))
    for w in out.warnings:
        print(f"warning: {w}")
    return EXIT_OK


def _cmd_ci(args) -> int:
    ms = ingest(args.data)
    spec = registry(args.factors, ms.p, _kind(args))
    rng = None
    if args.lower is not None or args.upper is not None:
        if args.lower is None or args.upper is None or args.lower >= args.upper:
            raise _ArgumentError("--lower and --upper must be given together with lower < upper")
        rng = (args.lower, args.upper)
    ci = ci_invert(spec, ms, _space(args, args.factors, ms.p), args.method, args.alpha,
                   n_grid=args.grid, r_range=rng)
    print(report(ci, args.out))
    return EXIT_OK


def _cmd_select(args) -> int:
    ms = ingest(args.data)
    rep = select_factors(ms, args.candidates, args.beta_min, args.beta_max, starts=args.starts, seed=args.seed)
    print(report(rep, args.out))
    return EXIT_OK


def _cmd_fit(args) -> int:
    ms = ingest(args.data)
    space = _space(args, args.factors, ms.p)
    fit = minimize_full(ms, space, starts=args.starts, seed=args.seed)
    names = space.model.names
    width = max(len(s) for s in names)
    for name, value in zip(names, fit.x):
        print(f"{name.ljust(width)}  {value: .6g}")
    print(f"Q_min {fit.qmin:.4f}  converged {fit.converged}  starts {fit.starts_used}")
    if space.model.k > space.model.q:
        jt = j_test(ms, space, starts=args.starts, seed=args.seed)
        print(f"J test: df {jt.df:g}  p-value {jt.pvalue:.4g}")
    return EXIT_OK


_COMMANDS = {
    "simulate": _cmd_simulate,
    "mc": _cmd_mc,
    "test": _cmd_test,
    "ci": _cmd_ci,
    "select": _cmd_select,
    "fit": _cmd_fit,
}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = _parse(parser, argv)
        with np.errstate(all="ignore"):
            return _COMMANDS[args.command](args)
    except _ArgumentError as exc:
        print(exc, file=sys.stderr)
        return EXIT_INVALID
    except ReplicationFailureError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_REPLICATION
    except WeakFactorError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


def _parse(parser: argparse.ArgumentParser, argv: list[str]) -> argparse.Namespace:
    config = None
    command = None
    for i, tok in enumerate(argv):
        if tok == "--config" and i + 1 < len(argv):
            config = argv[i + 1]
        elif tok.startswith("--config="):
            config = tok.split("=", 1)[1]
        elif tok in _COMMANDS and command is None:
            command = tok
    if config is not None and command is not None:
        _apply_config(parser, command, config)
    return parser.parse_args(argv)


if __name__ == "__main__":
    sys.exit(main())
