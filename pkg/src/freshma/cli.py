"""Command-line entry point.

Subcommands::

    freshma analyze aoii --scheme polling|tree|aloha --M 2 --N 10 --c 3 --lambda 0.1
    freshma analyze peak --scheme td|fd ...
    freshma optimize fd --K 1 --c 3 --lambda 0.1 --eps 1e-6
    freshma solve xd --M 3 --N2 1 --c 3 --lambda 0.1 --imax 2 --eps 1e-6 [--policy-out FILE]
    freshma meanfield --mode aoii|peak --M 200 --lambda 0.2 --c 3
    freshma simulate --scheme SCHEME ... --slots 1000000 --warmup 10000 --seed 0
    freshma compare --scheme SCHEME ...   # analytic and simulated rows per point
    freshma sweep --config FILE

Every subcommand except ``sweep`` accepts ``--sweep NAME=v1,v2,...`` and
writes CSV (or JSON with ``--format json``) to ``--output`` or standard
output.  CSV columns are the sorted parameter names followed by the metric
columns.  Floats carry 12 significant digits.

Exit status: 0 on success, 2 for bad arguments or parameters, 3 for
infeasible parameters, 4 when an iterative solver does not converge, 1 for
any other model error.

Simulation traces are not dumped.  Each simulated row reports the seed,
the 95% batch-means half-width of its headline metric and, for queueing
schemes, the Little's-law residual.
"""
from __future__ import annotations

import argparse
import json
import sys
import warnings
from pathlib import Path

from .config import COMMANDS, RunConfig, load_config
from .errors import ConvergenceError, FreshmaError, InfeasibleParametersError, InvalidParameterError
from .experiments import DEFAULTS, ExperimentSpec, canonical_scheme, rows_to_csv, rows_to_json, run_experiment

EXIT_OK, EXIT_ERROR, EXIT_USAGE, EXIT_INFEASIBLE, EXIT_CONVERGENCE = 0, 1, 2, 3, 4

SIM_SCHEMES = ("polling", "tree", "aloha", "td", "fd", "xd", "meanfield")
INT_PARAMS = ("M", "N", "R", "Z1", "Z2", "K", "N1", "N2", "imax", "Q0max")
FLOAT_PARAMS = ("lambda", "w1", "eps", "gamma")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise _UsageError(f"{self.prog}: error: {message}")


class _UsageError(Exception):
    pass


def _number(text: str):
    v = float(text)
    return int(v) if v.is_integer() and "." not in text and "e" not in text.lower() else v


def _add_params(p: argparse.ArgumentParser, names, *, mode=False) -> None:
    for name in names:
        if name in INT_PARAMS:
            p.add_argument(f"--{name}", type=int, dest=f"p_{name}")
        elif name in FLOAT_PARAMS:
            p.add_argument(f"--{name}", type=float, dest=f"p_{name}")
        elif name == "c":
            p.add_argument("--c", type=_number, dest="p_c")
        elif name == "mode" and mode:
            p.add_argument("--mode", choices=("aoii", "peak"), dest="p_mode")
        elif name == "service":
            p.add_argument("--service", choices=("single", "age"), dest="p_service")
        elif name == "cra":
            p.add_argument("--cra", choices=("tree", "aloha"), dest="p_cra")
        elif name == "placement":
            p.add_argument("--placement", choices=("completion", "printed"), dest="p_placement")


def _add_output(p: argparse.ArgumentParser) -> None:
    p.add_argument("--output", help="output file (default: standard output)")
    p.add_argument("--format", choices=("csv", "json"), default="csv")
    p.add_argument("--workers", type=int, help="worker processes (default: $FRESHMA_WORKERS or 1)")
    p.add_argument("--sweep", metavar="NAME=V1,V2,...", help="sweep one parameter over a value list")


def _add_sim(p: argparse.ArgumentParser) -> None:
    p.add_argument("--slots", type=int, default=1_000_000)
    p.add_argument("--warmup", type=int, default=10_000)
    p.add_argument("--seed", type=int, default=0)


ALL_PARAMS = sorted({k for d in DEFAULTS.values() for k in d})


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="freshma", description="Freshness analysis of multiple-access schemes.")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    an = sub.add_parser("analyze", help="analytic model of one scheme")
    an.add_argument("kind", choices=("aoii", "peak"))
    an.add_argument("--scheme", required=True, choices=("polling", "tree", "aloha", "td", "fd"))
    _add_params(an, ALL_PARAMS)
    _add_output(an)

    op = sub.add_parser("optimize", help="optimal FD bandwidth split")
    op.add_argument("kind", choices=("fd",))
    _add_params(op, DEFAULTS["fd"])
    _add_output(op)

    so = sub.add_parser("solve", help="XD bandwidth MDP by value iteration")
    so.add_argument("kind", choices=("xd",))
    _add_params(so, DEFAULTS["xd"])
    so.add_argument("--policy-out", help="write the policy table as JSON to this file")
    _add_output(so)

    mf = sub.add_parser("meanfield", help="mean-field approximation for many nodes")
    _add_params(mf, DEFAULTS["meanfield"], mode=True)
    _add_output(mf)

    for name, text in (("simulate", "slot-level simulation"), ("compare", "analytic and simulated rows")):
        p = sub.add_parser(name, help=text)
        p.add_argument("--scheme", required=True, choices=SIM_SCHEMES)
        _add_params(p, ALL_PARAMS, mode=True)
        _add_sim(p)
        _add_output(p)

    sw = sub.add_parser("sweep", help="run an experiment file")
    sw.add_argument("--config", required=True)
    sw.add_argument("--output")
    sw.add_argument("--format", choices=("csv", "json"))
    sw.add_argument("--workers", type=int)
    return ap


_KIND_SCHEMES = {"aoii": ("polling", "tree", "aloha"), "peak": ("td", "fd")}


def _parse_sweep(text: str | None):
    if text is None:
        return None
    name, sep, values = text.partition("=")
    if not sep or not name or not values:
        raise InvalidParameterError(f"--sweep expects NAME=V1,V2,..., got {text!r}")
    out = []
    for v in values.split(","):
        try:
            out.append(_number(v))
        except ValueError:
            out.append(v)
    return {"parameter": name, "values": out}


def _spec_from_args(args) -> RunConfig:
    params = {k[2:]: v for k, v in vars(args).items() if k.startswith("p_") and v is not None}
    cmd = args.command
    if cmd == "analyze":
        if args.scheme not in _KIND_SCHEMES[args.kind]:
            raise InvalidParameterError(f"analyze {args.kind} supports schemes {', '.join(_KIND_SCHEMES[args.kind])}")
        scheme = args.scheme
    elif cmd in ("simulate", "compare"):
        scheme = args.scheme
        if cmd == "compare" and scheme == "meanfield":
            params.setdefault("mode", "aoii")
    else:
        scheme = {"optimize": "fd", "solve": "xd", "meanfield": "meanfield"}[cmd]
    sim = cmd in ("simulate", "compare")
    spec = ExperimentSpec(
        COMMANDS[cmd], scheme, params, _parse_sweep(args.sweep), {"path": args.output, "format": args.format},
        slots=args.slots if sim else 1_000_000, warmup=args.warmup if sim else 10_000,
        seed=args.seed if sim else 0)
    return RunConfig(spec, args.workers)


def _emit(text: str, path: str | None) -> None:
    if path is None:
        sys.stdout.write(text)
        sys.stdout.flush()
    else:
        Path(path).write_text(text)


def _solve_extra(spec: ExperimentSpec, policy_out: str | None) -> dict | None:
    """Policy table for a single ``solve xd`` point, when requested."""
    want_json = spec.output.get("format") == "json"
    if spec.mode != "solve-mdp" or spec.sweep is not None or not (policy_out or want_json):
        return None
    from .peak_xd import build_xd_mdp, export_policy, solve_xd

    p = {**DEFAULTS["xd"], **spec.parameters}
    mdp = build_xd_mdp(int(p["M"]), int(p["N2"]), int(p["c"]), float(p["lambda"]), int(p["imax"]),
                       int(p["Q0max"]))
    sol = solve_xd(mdp, float(p["eps"]))
    table = export_policy(mdp, sol.result)
    if policy_out:
        Path(policy_out).write_text(table + "\n")
    return json.loads(table) if want_json else None


def execute(cfg: RunConfig, policy_out: str | None = None) -> str:
    spec = cfg.spec
    rows = run_experiment(spec, cfg.workers)
    params = set(DEFAULTS[canonical_scheme(spec.scheme)]) | ({spec.sweep["parameter"]} if spec.sweep else set())
    extra = _solve_extra(spec, policy_out)
    if spec.output.get("format") == "json":
        return rows_to_json(rows, {"policy": extra["policy"]} if extra else None) + "\n"
    return rows_to_csv(rows, params)


def _show_warning(message, category, filename, lineno, file=None, line=None):
    print(f"warning: {message}", file=sys.stderr)


def run(argv=None) -> int:
    """Parse ``argv``, run, write output and return the exit status."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)

    warnings.showwarning = _show_warning
    try:
        if args.command == "sweep":
            cfg = load_config(args.config)
            if args.output is not None:
                cfg.spec.output["path"] = args.output
            if args.format is not None:
                cfg.spec.output["format"] = args.format
            if args.workers is not None:
                cfg.workers = args.workers
            text = execute(cfg)
        else:
            cfg = _spec_from_args(args)
            text = execute(cfg, getattr(args, "policy_out", None))
        _emit(text, cfg.spec.output.get("path"))
    except InfeasibleParametersError as exc:
        bound = f" [bound: {exc.bound}]" if exc.bound is not None else ""
        print(f"freshma: infeasible parameters: {exc}{bound}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except ConvergenceError as exc:
        print(f"freshma: no convergence: {exc}", file=sys.stderr)
        return EXIT_CONVERGENCE
    except InvalidParameterError as exc:
        print(f"freshma: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FreshmaError as exc:
        print(f"freshma: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except OSError as exc:
        print(f"freshma: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
