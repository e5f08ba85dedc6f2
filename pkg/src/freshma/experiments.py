"""Experiment points, sweeps and tabular output shared by the CLI.

An experiment point is ``(mode, scheme, parameters)``.  Running it yields
one result row per method (analytic or simulated).  Each row is a flat dict
of the input parameters plus metric columns.
"""
from __future__ import annotations

import csv
import io
import json
import math
import os
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Iterable

from .errors import InvalidParameterError

MODES = ("analyze", "simulate", "compare", "optimize", "solve-mdp", "meanfield")
FORMATS = ("csv", "json")

# CLI scheme name -> simulator scheme
SIM_ALIASES = {
    "polling": "polling-aoii", "tree": "tree-aoii", "aloha": "aloha-aoii", "td": "td-peak", "fd": "fd-peak",
    "xd": "xd-policy", "meanfield": "meanfield-reference",
}

# default parameters per scheme, keyed by the CLI flag names
DEFAULTS: dict[str, dict[str, Any]] = {
    "polling": {"M": 2, "N": 10, "c": 3, "lambda": 0.1, "service": "single"},
    "tree": {"M": 2, "N": 10, "c": 3, "lambda": 0.1, "R": 3},
    "aloha": {"M": 2, "N": 10, "c": 3, "lambda": 0.1},
    "td": {"Z1": 3, "Z2": 1, "c": 3, "N": 5, "lambda": 0.04, "cra": "tree", "R": 3, "placement": "completion"},
    "fd": {"K": 1, "c": 3, "lambda": 0.1, "w1": 0.4, "N1": 30, "N2": 30, "eps": 1e-6},
    "xd": {"M": 3, "N2": 1, "c": 3, "lambda": 0.1, "imax": 2, "Q0max": 10, "eps": 1e-6},
    "meanfield": {"M": 200, "lambda": 0.2, "c": 3, "mode": "aoii", "N": None, "gamma": math.exp(-1.0)},
}

METRIC_ORDER = (
    "method", "avg_aoii", "peak_aoii", "peak_less_offset", "L_bar", "lambda_eff", "loss_rate", "mean_q1", "mean_q2", "w1_opt",
    "L_eps", "L_policy", "extreme_fraction", "alpha", "eta", "h_bar", "pi1", "d_peak_dw1", "cap_mass",
    "states", "iterations", "span", "feasible", "ci_half_width", "std_error", "mean_sojourn", "little_residual",
    "divergent", "seed",
)


@dataclass
class ExperimentSpec:
    """A mode, a scheme, base parameters, an optional one-parameter sweep and an output target."""

    mode: str
    scheme: str
    parameters: dict = field(default_factory=dict)
    sweep: dict | None = None
    output: dict = field(default_factory=lambda: {"path": None, "format": "csv"})
    slots: int = 1_000_000
    warmup: int = 10_000
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise InvalidParameterError(f"mode must be one of {', '.join(MODES)}, got {self.mode!r}")
        base = canonical_scheme(self.scheme)
        known = set(DEFAULTS[base])
        bad = sorted(set(self.parameters) - known)
        if bad:
            raise InvalidParameterError(f"unknown parameters for scheme {self.scheme}: {', '.join(bad)}")
        if self.sweep is not None:
            if set(self.sweep) != {"parameter", "values"}:
                raise InvalidParameterError("sweep needs exactly the keys 'parameter' and 'values'")
            if self.sweep["parameter"] not in known:
                raise InvalidParameterError(
                    f"sweep parameter {self.sweep['parameter']!r} does not exist for scheme {self.scheme}")
            if not isinstance(self.sweep["values"], list) or not self.sweep["values"]:
                raise InvalidParameterError("sweep values must be a non-empty list")
        fmt = (self.output or {}).get("format", "csv")
        if fmt not in FORMATS:
            raise InvalidParameterError(f"output format must be csv or json, got {fmt!r}")

    def points(self) -> list[dict]:
        base = {**DEFAULTS[canonical_scheme(self.scheme)], **self.parameters}
        if self.sweep is None:
            return [base]
        return [{**base, self.sweep["parameter"]: v} for v in self.sweep["values"]]


def canonical_scheme(name: str) -> str:
    inverse = {v: k for k, v in SIM_ALIASES.items()}
    name = inverse.get(name, name)
    if name not in DEFAULTS:
        raise InvalidParameterError(f"unknown scheme {name!r}")
    return name


def worker_count(flag: int | None = None) -> int:
    """Worker cap from the flag, else ``FRESHMA_WORKERS``, else 1."""
    if flag is not None:
        n = flag
    else:
        raw = os.environ.get("FRESHMA_WORKERS", "1")
        try:
            n = int(raw)
        except ValueError:
            raise InvalidParameterError(f"FRESHMA_WORKERS must be an integer, got {raw!r}") from None
    if n < 1:
        raise InvalidParameterError("worker count must be >= 1")
    return n


# --------------------------------------------------------------------------
# analytic points
# --------------------------------------------------------------------------

def _analytic_aoii(scheme: str, p: dict) -> dict:
    from .aoii_exact import age_cap_mass, average_aoii, build_polling_aoii_chain, build_ra_aoii_chain
    from .cra import aloha_cra, tree_splitting_cra

    M, N, c, lam = int(p["M"]), int(p["N"]), int(p["c"]), float(p["lambda"])
    if scheme == "polling":
        ch = build_polling_aoii_chain(M, N, c, lam, service=p.get("service", "single"))
    elif scheme == "tree":
        ch = build_ra_aoii_chain(M, N, c, lam, tree_splitting_cra(M, int(p.get("R", 3))))
    else:
        ch = build_ra_aoii_chain(M, N, c, lam, aloha_cra(M))
    return {"avg_aoii": average_aoii(ch), "cap_mass": age_cap_mass(ch), "states": ch.dimension}


def _analytic_td(p: dict) -> dict:
    from .peak_td import analyze_td

    m = analyze_td(int(p["Z1"]), int(p["Z2"]), int(p["c"]), int(p["N"]), float(p["lambda"]),
                   cra=p.get("cra", "tree"), R=int(p.get("R", 3)), placement=p.get("placement", "completion"))
    return {"peak_aoii": m.peak_aoii, "L_bar": m.L_bar, "lambda_eff": m.lambda_eff, "loss_rate": m.loss_rate,
            "mean_q1": m.mean_q1, "mean_q2": m.mean_q2}


def _fd_params(p: dict, with_w1: bool = True):
    from .peak_fd import FdParams

    return FdParams(int(p["K"]), float(p["c"]), float(p["lambda"]), float(p["w1"]) if with_w1 else None,
                    int(p.get("N1", 30)), int(p.get("N2", 30)))


def _fd_offset(p: dict) -> float:
    """Mean wait ``K T2 / 2`` from an arrival to the next frame boundary."""
    return int(p["K"]) * float(p["c"]) / (1.0 - float(p["w1"])) / 2.0


def _analytic_fd(p: dict) -> dict:
    from .peak_fd import fd_mean_occupancy, fd_peak_aoii, fd_peak_aoii_derivative

    prm = _fd_params(p)
    feasible = prm.is_stable()
    if not feasible:
        lo, hi = prm.w1_interval
        warnings.warn(f"w1={prm.w1} lies outside the stability interval ({lo:.6g}, {hi:.6g})", stacklevel=2)
    q1, q2, L = fd_mean_occupancy(prm)
    peak = fd_peak_aoii(prm)
    return {"peak_aoii": peak, "peak_less_offset": peak - _fd_offset(p), "L_bar": L, "mean_q1": q1, "mean_q2": q2,
            "d_peak_dw1": fd_peak_aoii_derivative(prm), "feasible": feasible}


def _optimize_fd(p: dict) -> dict:
    from .peak_fd import optimize_fd_bandwidth

    opt = optimize_fd_bandwidth(_fd_params(p, with_w1=False), float(p.get("eps", 1e-6)))
    return {"w1_opt": opt.w1, "peak_aoii": opt.peak_aoii, "iterations": opt.iterations, "feasible": True}


def _solve_xd(p: dict, keep_policy: bool = False):
    from .peak_xd import build_xd_mdp, solve_xd

    mdp = build_xd_mdp(int(p["M"]), int(p["N2"]), int(p["c"]), float(p["lambda"]), int(p.get("imax", 2)),
                       int(p.get("Q0max", 10)))
    sol = solve_xd(mdp, float(p.get("eps", 1e-6)))
    row = {"L_eps": sol.L_eps, "L_policy": sol.L_policy, "L_bar": sol.L_policy, "lambda_eff": sol.lambda_eff,
           "peak_aoii": sol.peak_aoii, "extreme_fraction": sol.extreme_fraction, "states": mdp.n_states,
           "iterations": sol.result.iterations, "span": sol.result.span_at_stop}
    if keep_policy:
        return row, mdp, sol
    return row


def _meanfield(p: dict) -> dict:
    from .meanfield import mf_aoii_closed_form, mf_peak_fixed_point

    M, lam, c = int(p["M"]), float(p["lambda"]), int(p["c"])
    gamma = float(p.get("gamma") or math.exp(-1.0))
    if p.get("mode", "aoii") == "aoii":
        cf = mf_aoii_closed_form(M, lam, c, gamma)
        return {"avg_aoii": cf.avg_aoii, "alpha": cf.alpha, "eta": cf.eta, "pi1": cf.pi1}
    N = p.get("N")
    r = mf_peak_fixed_point(M, lam, c, None if N is None else int(N), gamma=gamma)
    fp = r.fixed_point
    return {"peak_aoii": r.peak_aoii, "alpha": fp.alpha, "eta": fp.eta, "h_bar": fp.h_bar,
            "iterations": fp.iterations, "states": r.model.size}


def analytic_row(mode: str, scheme: str, p: dict) -> dict:
    scheme = canonical_scheme(scheme)
    if mode == "optimize":
        if scheme != "fd":
            raise InvalidParameterError("optimize supports scheme fd")
        out = _optimize_fd(p)
    elif mode == "solve-mdp":
        if scheme != "xd":
            raise InvalidParameterError("solve-mdp supports scheme xd")
        out = _solve_xd(p)
    elif mode == "meanfield" or scheme == "meanfield":
        out = _meanfield(p)
    elif scheme in ("polling", "tree", "aloha"):
        out = _analytic_aoii(scheme, p)
    elif scheme == "td":
        out = _analytic_td(p)
    elif scheme == "fd":
        out = _analytic_fd(p)
    elif scheme == "xd":
        out = _solve_xd(p)
    else:
        raise InvalidParameterError(f"no analytic model for scheme {scheme!r}")
    return {"method": "analytic", **out}


# --------------------------------------------------------------------------
# simulated points
# --------------------------------------------------------------------------

def sim_parameters(scheme: str, p: dict) -> dict:
    """Translate CLI-named parameters into the simulator's parameter record."""
    scheme = canonical_scheme(scheme)
    q = {k: v for k, v in p.items() if v is not None and k not in ("eps", "service")}
    if scheme == "xd":
        q["i_max"] = int(q.pop("imax", 2))
        if "policy" not in q:
            _, mdp, sol = _solve_xd(p, keep_policy=True)
            q["policy"] = sol.policy
    if scheme == "meanfield":
        q.pop("N", None)
    return q


def simulated_row(scheme: str, p: dict, slots: int, warmup: int, seed: int) -> dict:
    from .simulator import SimConfig, little_consistency, simulate

    name = SIM_ALIASES.get(canonical_scheme(scheme))
    met = simulate(SimConfig(name, sim_parameters(scheme, p), int(slots), int(warmup), int(seed)))
    row: dict = {"method": "simulated"}
    if met.has_queue:
        key = "avg_peak_aoii"
        row.update(peak_aoii=met.avg_peak_aoii,
                   L_bar=met.avg_cost if name == "xd-policy" else met.mean_occupancy,
                   lambda_eff=met.throughput, loss_rate=met.loss_rate, mean_q1=met.mean_q1, mean_q2=met.mean_q2,
                   mean_sojourn=met.mean_sojourn, little_residual=little_consistency(met))
        if met.time_unit == "frame":
            # FD counts in frames of K c / (1 - w1) slots; report rates per slot
            frame = int(p["K"]) * float(p["c"]) / (1.0 - float(p["w1"]))
            row["lambda_eff"] = met.throughput / frame
            row["peak_less_offset"] = met.avg_peak_aoii - _fd_offset(p)
            del row["mean_sojourn"]
    else:
        key = "avg_aoii"
        row.update(avg_aoii=met.avg_aoii, lambda_eff=met.throughput)
    row["ci_half_width"] = met.half_widths.get(key, 0.0)
    row["std_error"] = met.std_errors.get(key, 0.0)
    row["divergent"] = met.divergent
    row["seed"] = seed
    return row


# --------------------------------------------------------------------------
# running and output
# --------------------------------------------------------------------------

def _run_point(args) -> list[dict]:
    mode, scheme, p, slots, warmup, seed = args
    params = {k: v for k, v in p.items() if v is not None}
    if mode == "simulate":
        rows = [simulated_row(scheme, p, slots, warmup, seed)]
    elif mode == "compare":
        rows = [analytic_row("analyze", scheme, p), simulated_row(scheme, p, slots, warmup, seed)]
    else:
        rows = [analytic_row(mode, scheme, p)]
    return [{**params, **r} for r in rows]


def run_experiment(spec: ExperimentSpec, workers: int | None = None) -> list[dict]:
    """All rows of an experiment, in sweep order regardless of completion order."""
    jobs = [(spec.mode, spec.scheme, p, spec.slots, spec.warmup, spec.seed) for p in spec.points()]
    n = min(worker_count(workers), len(jobs))
    if n <= 1:
        chunks = [_run_point(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=n) as ex:
            chunks = list(ex.map(_run_point, jobs))
    return [row for chunk in chunks for row in chunk]


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return "%.12g" % v
    return str(v)


def column_order(rows: Iterable[dict], params: Iterable[str]) -> list[str]:
    params = set(params)
    keys: set = set()
    for r in rows:
        keys.update(r)
    p_cols = sorted(k for k in keys if k in params)
    m_cols = [k for k in METRIC_ORDER if k in keys]
    extra = sorted(keys - set(p_cols) - set(m_cols))
    return p_cols + m_cols + extra


def rows_to_csv(rows: list[dict], params: Iterable[str]) -> str:
    cols = column_order(rows, params)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for r in rows:
        w.writerow([_fmt(r.get(k)) for k in cols])
    return buf.getvalue()


def _jsonable(v):
    if isinstance(v, float) and not math.isfinite(v):
        return None
    if hasattr(v, "item"):
        return v.item()
    return v


def rows_to_json(rows: list[dict], extra: dict | None = None) -> str:
    doc = {"rows": [{k: _jsonable(v) for k, v in r.items()} for r in rows]}
    if extra:
        doc.update(extra)
    return json.dumps(doc, sort_keys=True, indent=1)


__all__ = [
    "DEFAULTS", "ExperimentSpec", "FORMATS", "MODES", "analytic_row", "canonical_scheme", "column_order",
    "rows_to_csv", "rows_to_json", "run_experiment", "sim_parameters", "simulated_row", "worker_count",
]
