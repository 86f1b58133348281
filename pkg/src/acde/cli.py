"""Command-line front end: ``acde {match,tune,balance,test,sensitivity,simulate}``.

Exit codes: 0 success, 1 usage or input error, 2 infeasible computation.
Primary CSV output goes to ``--output`` (default standard output); one-line
summaries go to standard error.
"""

import argparse
import contextlib
import json
import sys
import warnings

from . import __version__
from .balance import average_basmd, tune_hyperparams, write_balance_report, write_tune_trace
from .dataset import BLOCK_SCHEMES, EQUAL_COUNT, block_partition, load_csv
from .errors import (ACDEError, DatasetTooSmallError, InfeasiblePartitionError, ParseError)
from .inference import (EXACT, GREATER, LESS, MONTE_CARLO, NORMAL, TWO_SIDED, permutation_test,
                        write_test_report)
from .matching import (DROP, EUCLIDEAN, FAIL, SCALED_EUCLIDEAN, MatchConfig, estimate_acde,
                       find_matches, pair_weights, write_matched_set)
from .sensitivity import DEFAULT_GAMMA_GRID, gamma_breakeven, write_gamma_curve
from .simulation import (TABLE1, TABLE2, SimDesign, run_experiment, write_response_curve,
                         write_sim_report)

EXIT_USAGE = 1
EXIT_INFEASIBLE = 2

_METHODS = {"exact": EXACT, "mc": MONTE_CARLO, "normal": NORMAL}
_SIDES = {"two": TWO_SIDED, "greater": GREATER, "less": LESS}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def parse_range(text):
    """``start:stop:step`` with ``stop`` included."""
    try:
        start, stop, step = (float(v) for v in text.split(":"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected start:stop:step, got {text!r}") from None
    if step <= 0 or stop < start:
        raise argparse.ArgumentTypeError(f"need step > 0 and stop >= start, got {text!r}")
    count = int(round((stop - start) / step))
    values = [round(start + j * step, 12) for j in range(count + 1)]
    return [v for v in values if v <= stop + 1e-9 * max(1.0, abs(stop))]


def parse_list(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _positive_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text!r}")
    return v


def _common(p, matching=True):
    p.add_argument("--config", help="key = value file mirroring the flags")
    p.add_argument("--output", "-o", help="CSV output path (default: standard output)")
    p.add_argument("--summary-json", help="write a JSON summary object to this path")
    p.add_argument("--threads", type=_positive_int, default=1)
    if matching:
        p.add_argument("--input", "-i", required=True, help="dataset CSV (y,z,x1..xd[,id])")
        p.add_argument("--metric", choices=[SCALED_EUCLIDEAN, EUCLIDEAN], default=SCALED_EUCLIDEAN)
        p.add_argument("--on-unmatched", choices=[FAIL, DROP], default=FAIL)
        p.add_argument("--no-self", action="store_true",
                       help="forbid an individual from being its own match")


def _blocks(p):
    p.add_argument("--blocks", type=int, default=4, metavar="K")
    p.add_argument("--block-scheme", choices=BLOCK_SCHEMES, default=EQUAL_COUNT)


def build_parser():
    parser = _Parser(prog="acde", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"acde {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("match", help="match triplets and estimate the ACDE at z0")
    _common(p)
    p.add_argument("--z0", type=float, required=True)
    p.add_argument("--eta", type=float, required=True)
    p.add_argument("--kappa", type=float, required=True)

    p = sub.add_parser("tune", help="grid-search (eta, kappa) by average BASMD")
    _common(p)
    _blocks(p)
    p.add_argument("--z0", type=float, required=True)
    p.add_argument("--eta-grid", type=parse_list, required=True)
    p.add_argument("--kappa-grid", type=parse_list, required=True)

    p = sub.add_parser("balance", help="BASMD balance report for one matching")
    _common(p)
    _blocks(p)
    p.add_argument("--z0", type=float, required=True)
    p.add_argument("--eta", type=float, required=True)
    p.add_argument("--kappa", type=float, required=True)

    p = sub.add_parser("test", help="permutation test of no local effect")
    _common(p)
    z = p.add_mutually_exclusive_group(required=True)
    z.add_argument("--z0", type=float)
    z.add_argument("--z0-grid", type=parse_range, metavar="START:STOP:STEP")
    p.add_argument("--eta", type=float, required=True)
    p.add_argument("--kappa", type=float, required=True)
    p.add_argument("--method", choices=list(_METHODS), default="normal")
    p.add_argument("--sided", choices=list(_SIDES), default="two")
    p.add_argument("--reps", type=_positive_int, default=10000)
    p.add_argument("--seed", type=int)

    p = sub.add_parser("sensitivity", help="gamma sensitivity curve and break-even gamma")
    _common(p)
    p.add_argument("--z0", type=float, required=True)
    p.add_argument("--eta", type=float, required=True)
    p.add_argument("--kappa", type=float, required=True)
    p.add_argument("--method", choices=list(_METHODS), default="mc")
    p.add_argument("--reps", type=_positive_int, default=10000)
    p.add_argument("--seed", type=int)
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--gamma-grid", type=parse_range, metavar="START:STOP:STEP")

    p = sub.add_parser("simulate", help="Monte Carlo study of the estimator and test")
    _common(p, matching=False)
    preset = p.add_mutually_exclusive_group()
    preset.add_argument("--table1", action="store_true", help="d=3, N=3000 design at five levels")
    preset.add_argument("--table2", action="store_true", help="3 sample sizes x 3 dimensions at z0=5")
    preset.add_argument("--curve", action="store_true", help="emit the true exposure-response curve")
    p.add_argument("--dim", type=int, choices=[2, 3, 4], default=3)
    p.add_argument("--n", type=int, default=3000)
    p.add_argument("--z0", type=float)
    p.add_argument("--z0-grid", type=parse_range, metavar="START:STOP:STEP")
    p.add_argument("--eta", type=float, default=0.5)
    p.add_argument("--kappa", type=float, default=0.1)
    p.add_argument("--method", choices=["mc", "normal"], default="normal")
    p.add_argument("--reps", type=_positive_int)
    p.add_argument("--mc-reps", type=_positive_int, default=10000)
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--null-outcome", action="store_true",
                   help="drop the exposure term from the outcome")
    return parser


def read_config(path):
    """Turn a ``key = value`` file into flag tokens; ``true``/``false`` toggle switches."""
    tokens = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected 'key = value'")
            key, value = (s.strip() for s in line.split("=", 1))
            flag = "--" + key.replace("_", "-")
            if value.lower() in ("true", "yes", "on"):
                tokens.append(flag)
            elif value.lower() in ("false", "no", "off"):
                continue
            else:
                tokens += [flag, value]
    return tokens


def _expand_config(argv):
    if "--config" not in argv:
        return argv
    pos = argv.index("--config")
    if pos + 1 >= len(argv):
        return argv
    # config tokens go first so that explicit flags, parsed later, win
    rest = argv[:pos] + argv[pos + 2:]
    return rest[:1] + read_config(argv[pos + 1]) + rest[1:]


@contextlib.contextmanager
def _output(path):
    if path is None or path == "-":
        yield sys.stdout
    else:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            yield fh


def _say(text):
    print(text, file=sys.stderr)


def _summary(args, payload):
    if args.summary_json:
        with open(args.summary_json, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, sort_keys=True, indent=2)
            fh.write("\n")


def _config(args, z0=None):
    try:
        return MatchConfig(args.z0 if z0 is None else z0, args.eta, args.kappa, args.metric,
                           not args.no_self)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _partition(args, ds):
    try:
        return block_partition(ds, args.blocks, args.block_scheme)
    except InfeasiblePartitionError:
        raise
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def cmd_match(args):
    ds = load_csv(args.input)
    cfg = _config(args)
    ms = find_matches(ds, cfg, args.on_unmatched, threads=args.threads)
    est = estimate_acde(ds, ms)
    with _output(args.output) as fh:
        write_matched_set(ds, ms, fh)
    line = f"acde={est.acde_hat:.4f} n_used={est.n_used}"
    if ms.dropped:
        line += f" dropped={len(ms.dropped)}"
    _say(line)
    _summary(args, {"command": "match", "z0": cfg.z0, "eta": cfg.eta, "kappa": cfg.kappa,
                    "acde": est.acde_hat, "n_used": est.n_used, "dropped": len(ms.dropped)})


def cmd_tune(args):
    ds = load_csv(args.input)
    bp = _partition(args, ds)
    try:
        res = tune_hyperparams(ds, args.z0, args.eta_grid, args.kappa_grid, bp,
                               args.on_unmatched, args.metric, args.threads, not args.no_self)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    with _output(args.output) as fh:
        write_tune_trace(res, fh)
    b = res.best
    _say(f"eta={b.eta!r} kappa={b.kappa!r} average_basmd={b.average_basmd:.4f} "
         f"threshold_pass={str(res.report.threshold_pass).lower()}")
    _summary(args, {"command": "tune", "z0": args.z0, "eta": b.eta, "kappa": b.kappa,
                    "average_basmd": b.average_basmd,
                    "threshold_pass": res.report.threshold_pass})


def cmd_balance(args):
    ds = load_csv(args.input)
    bp = _partition(args, ds)
    ms = find_matches(ds, _config(args), args.on_unmatched, threads=args.threads)
    report = average_basmd(ds, ms, bp)
    with _output(args.output) as fh:
        write_balance_report(report, fh)
    _say(f"average_basmd={report.average_basmd:.4f} "
         f"threshold_pass={str(report.threshold_pass).lower()} effective_k={report.effective_k}")
    _summary(args, {"command": "balance", "average_basmd": report.average_basmd,
                    "threshold_pass": report.threshold_pass, "effective_k": report.effective_k})


def _needs_seed(args):
    if args.method == "mc" and args.seed is None:
        raise UsageError("--seed is required with --method mc")


def cmd_test(args):
    _needs_seed(args)
    method, side = _METHODS[args.method], _SIDES[args.sided]
    ds = load_csv(args.input)
    levels = [args.z0] if args.z0 is not None else args.z0_grid
    rows = []
    for z0 in levels:
        ms = find_matches(ds, _config(args, z0), args.on_unmatched, threads=args.threads)
        pw = pair_weights(ds, ms)
        try:
            res = permutation_test(pw, method, side, args.reps, args.seed, args.threads)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
        rows.append((z0, res))
        flag = " lindeberg_warning" if res.lindeberg_warning else ""
        _say(f"z0={z0!r} estimate={res.t_obs:.4f} p_value={res.p_value:.4g}{flag}")
    with _output(args.output) as fh:
        write_test_report(rows, fh)
    _summary(args, {"command": "test", "method": method, "sidedness": side,
                    "results": [{"z0": z, "estimate": r.t_obs, "p_value": r.p_value,
                                 "lindeberg_ratio": r.lindeberg_ratio} for z, r in rows]})


def cmd_sensitivity(args):
    _needs_seed(args)
    ds = load_csv(args.input)
    ms = find_matches(ds, _config(args), args.on_unmatched, threads=args.threads)
    pw = pair_weights(ds, ms)
    grid = args.gamma_grid or list(DEFAULT_GAMMA_GRID)
    try:
        curve = gamma_breakeven(pw, args.alpha, grid, _METHODS[args.method], args.reps,
                                args.seed, args.threads)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    with _output(args.output) as fh:
        write_gamma_curve(curve, fh)
    _say(f"breakeven_gamma={curve.breakeven_gamma} alpha={curve.alpha}")
    _summary(args, {"command": "sensitivity", "breakeven_gamma": curve.breakeven_gamma,
                    "alpha": curve.alpha})


def cmd_simulate(args):
    if args.curve:
        with _output(args.output) as fh:
            write_response_curve(fh)
        return
    overrides = {"seed": args.seed, "alpha": args.alpha}
    if args.reps is not None:
        overrides["reps"] = args.reps
    try:
        if args.table1:
            designs = [TABLE1.replace(**overrides)]
        elif args.table2:
            designs = [d.replace(**overrides) for d in TABLE2]
        else:
            levels = ([args.z0] if args.z0 is not None else args.z0_grid) or list(TABLE1.z0_list)
            designs = [SimDesign(d=args.dim, n=args.n, z0_list=tuple(levels), eta=args.eta,
                                 kappa=args.kappa, null_outcome=args.null_outcome,
                                 **{"reps": 500, **overrides})]
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    method = _METHODS[args.method]
    reports = [run_experiment(d, method, args.threads, args.mc_reps) for d in designs]
    with _output(args.output) as fh:
        write_sim_report(reports, fh)
    _summary(args, {"command": "simulate", "method": method,
                    "cells": [{"d": r.design.d, "n": r.design.n, "z0": row.z0,
                               "rmse": row.rmse, "abs_bias": row.abs_bias,
                               "rejection_rate": row.rejection_rate}
                              for r in reports for row in r.rows]})


COMMANDS = {
    "match": cmd_match,
    "tune": cmd_tune,
    "balance": cmd_balance,
    "test": cmd_test,
    "sensitivity": cmd_sensitivity,
    "simulate": cmd_simulate,
}


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        argv = _expand_config(argv)
    except (OSError, UsageError) as exc:
        _say(f"acde: error: {exc}")
        return EXIT_USAGE
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return exc.code
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("always")
            warnings.showwarning = _show_warning
            COMMANDS[args.command](args)
    except (UsageError, ParseError, DatasetTooSmallError, OSError) as exc:
        _say(f"acde: error: {exc}")
        return EXIT_USAGE
    except ACDEError as exc:
        _say(f"acde: {args.command} infeasible: {exc}")
        return EXIT_INFEASIBLE
    return 0


def _show_warning(message, category, filename, lineno, file=None, line=None):
    _say(f"acde: warning: {message}")


if __name__ == "__main__":
    sys.exit(main())
