"""Command-line entry point.

    stochricker {analyze,simulate,qsd,sweep,cycles} --config run.yaml [--seed N] [--out-dir DIR]

Exit codes: 0 success, 2 config error, 3 numeric non-convergence,
4 infeasible instance.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .branching import simulate
from .config import ConfigError, load_config
from .deterministic import (
    classify_coexistence,
    detect_cycle,
    find_contracting_set,
    find_invariant_box,
    fixed_points,
    mutual_invasibility,
)
from .errors import (
    CapTooSmallError,
    InfeasibleError,
    NonConvergenceError,
    NotApplicableError,
    OrbitDivergenceError,
)
from .lab import (
    ar_approximation,
    cycle_support_study,
    fit_lambda_scaling,
    qsd_moments,
    retention_scaling,
    sweep_K,
)
from .qsd import (
    build_adaptive_chain,
    build_truncated_chain,
    expected_lifetime,
    lambda_upper_bound,
    monte_carlo_qsd,
    power_iterate_qsd,
)
from .rng import make_rng

EXIT_OK, EXIT_CONFIG, EXIT_NONCONVERGENCE, EXIT_INFEASIBLE = 0, 2, 3, 4

SIMULATE_STREAM = 10
QSD_STREAM = 11

SWEEP_COLUMNS = [
    "K", "lambda", "lifetime", "qsd_mean_x", "qsd_mean_y", "cov_xx", "cov_xy", "cov_yy",
    "dist_to_fp", "strip_mass_x", "strip_mass_y", "box_mass",
]


class Writer:
    """Serialised output writer stamping every file with a provenance header."""

    def __init__(self, out_dir, cfg, command):
        self.out = Path(out_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self.provenance = {
            "tool": "stochricker",
            "version": __version__,
            "command": command,
            "config_sha256": cfg.digest,
            "seed": cfg.seed,
        }
        self.files = []

    def _header(self):
        return "# " + " ".join(f"{k}={v}" for k, v in self.provenance.items()) + "\n"

    def csv(self, name, columns, rows):
        path = self.out / name
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            fh.write(self._header())
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(columns)
            for row in rows:
                w.writerow([_fmt(v) for v in row])
        self.files.append(name)

    def json(self, name, payload):
        path = self.out / name
        body = {"provenance": self.provenance, **payload}
        path.write_text(json.dumps(_jsonable(body), indent=2, sort_keys=True) + "\n")
        self.files.append(name)


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return int(v)
    return v


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, complex):
        return [obj.real, obj.imag]
    return obj


def _pt(p):
    return None if p is None else [p[0], p[1]]


# commands -------------------------------------------------------------------------


def cmd_analyze(cfg, out):
    p = cfg.model
    a = cfg.section("analyze")
    fp = fixed_points(p)
    report = {
        "params": p.to_dict(),
        "fixed_points": {
            "origin": _pt(fp.origin),
            "axis_x": _pt(fp.axis_x),
            "axis_y": _pt(fp.axis_y),
            "coexistence": _pt(fp.coexistence),
        },
        "mutual_invasibility": mutual_invasibility(p),
        "notices": [],
    }
    if fp.coexistence is None:
        report["notices"].append("no coexistence fixed point")
    if fp.degenerate:
        report["notices"].append("ab = 1: coexistence formula undefined")
    if report["mutual_invasibility"]:
        st = classify_coexistence(p)
        report["stability"] = {
            "kind": st.kind,
            "jacobian_spectral_radius": st.jacobian_spectral_radius,
            "condition_satisfied": st.condition_satisfied,
            "criteria_agree": st.criteria_agree,
            "chain": list(st.chain),
        }
        box = find_invariant_box(p, grid=a["grid"])
        report["invariant_box"] = None if box is None else {
            "box": list(box.box), "N": box.N, "margin": box.margin}
        cs = find_contracting_set(p, max_N=a["max_N"], grid=a["grid"])
        report["contracting_set"] = None if cs is None else {
            "box": list(cs.box), "N": cs.N, "margin": cs.margin}
    out.json("analyze.json", report)
    return EXIT_OK


def cmd_simulate(cfg, out):
    p = cfg.model
    s = cfg.section("simulate")
    lifetimes = []
    for i in range(s["n_trajectories"]):
        traj = simulate(s["initial"], p, make_rng(cfg.seed, SIMULATE_STREAM, i), s["max_steps"])
        lifetimes.append(traj.lifetime)
        if s["write_trajectories"]:
            out.csv(f"trajectories/traj_{i:05d}.csv", ["t", "m", "n"],
                    ([t, m, n] for t, (m, n) in enumerate(traj.states)))
    out.csv("lifetimes.csv", ["trajectory", "lifetime", "censored"],
            ([i, -1 if life is None else life, int(life is None)] for i, life in enumerate(lifetimes)))
    done = np.array([life for life in lifetimes if life is not None], dtype=float)
    hist = np.bincount(done.astype(np.int64)) if done.size else np.zeros(0, dtype=np.int64)
    out.csv("lifetime_histogram.csv", ["lifetime", "count"],
            ([k, int(c)] for k, c in enumerate(hist) if c))
    summary = {
        "n_trajectories": len(lifetimes),
        "n_censored": len(lifetimes) - int(done.size),
        "mean_lifetime": float(done.mean()) if done.size else None,
        "stderr_lifetime": float(done.std(ddof=1) / math.sqrt(done.size)) if done.size > 1 else None,
    }
    out.json("simulate.json", summary)
    return EXIT_OK


def cmd_qsd(cfg, out):
    p = cfg.model
    q = cfg.section("qsd")
    summary = {"method": q["method"], "lambda_upper_bound": lambda_upper_bound(p)}
    if q["method"] == "matrix":
        if q["cap"] is None:
            chain = build_adaptive_chain(p, q["overflow_budget"])
        else:
            chain = build_truncated_chain(p, q["cap"], q["overflow_budget"])
        est = power_iterate_qsd(chain, q["tol"], q["max_iter"])
        grid = est.grid()
        summary.update(
            cap=chain.cap,
            iterations=est.iterations,
            irreducible=est.irreducible,
            residual=est.residual,
            leak={
                "absorption_min": float(chain.absorption.min()),
                "absorption_max": float(chain.absorption.max()),
                "overflow_max": float(chain.overflow.max()),
                "overflow_pi_weighted": float(est.pi @ chain.overflow),
            },
        )
        lam = est.lam
    else:
        mc = monte_carlo_qsd(p, q["n_particles"], q["t_max"], make_rng(cfg.seed, QSD_STREAM))
        grid = mc.distribution
        lam = mc.lam
        summary.update(lambda_stderr=mc.lam_se, n_particles=mc.n_particles, restarts=mc.restarts)
    mean, cov = qsd_moments(grid, p)
    summary.update(lam=lam, expected_lifetime=expected_lifetime(lam), qsd_mean=mean, qsd_cov=cov)
    summary["lambda"] = summary.pop("lam")
    idx = np.argwhere(grid > 0)
    out.csv("qsd.csv", ["m", "n", "pi"], ([m, n, grid[m, n]] for m, n in idx))
    out.json("qsd.json", summary)
    return EXIT_OK


def _error_code(message):
    if message is None:
        return EXIT_OK
    if message.startswith("NonConvergenceError"):
        return EXIT_NONCONVERGENCE
    return EXIT_INFEASIBLE


def cmd_sweep(cfg, out):
    base = cfg.model
    s = cfg.section("sweep")
    K_list = s["K_list"]
    exps = s["experiments"]
    status = EXIT_OK
    summary = {"K_list": K_list, "experiments": exps}

    records = sweep_K(base, K_list, s["method"], strip_width=s["strip_width"], seed=cfg.seed)
    out.csv("sweep.csv", SWEEP_COLUMNS, (
        [r.K, r.lam, r.lifetime, r.qsd_mean[0], r.qsd_mean[1], r.qsd_cov[0][0], r.qsd_cov[0][1],
         r.qsd_cov[1][1], r.distance_to_fixed_point, r.strip_mass_x, r.strip_mass_y, r.box_mass]
        for r in records
    ))
    summary["records"] = [r.to_dict() for r in records]
    for r in records:
        status = max(status, _error_code(r.error))

    if "lambda" in exps:
        try:
            fit = fit_lambda_scaling(records)
            summary["lambda_fit"] = {"u_hat": fit.u_hat, "intercept": fit.intercept,
                                     "r_squared": fit.r_squared}
            out.csv("lambda_fit.csv", ["inv_K", "neg_log_one_minus_lambda", "residual"],
                    zip(fit.inv_K, fit.target, fit.residuals))
        except ValueError as exc:
            summary["lambda_fit"] = {"error": str(exc)}
    if "tightness" in exps:
        summary["tightness"] = [
            {"K": r.K, "strip_mass_x": r.strip_mass_x, "strip_mass_y": r.strip_mass_y,
             "box_mass": r.box_mass} for r in records
        ]
    if "retention" in exps:
        summary["retention"] = _retention_block(base, s, cfg.seed)
    if "ar" in exps:
        block = []
        for r in records:
            try:
                ar = ar_approximation(base.with_K(r.K))
                block.append({"K": r.K, "stationary_cov": ar.stationary_cov, "noise_cov": ar.noise_cov,
                              "qsd_cov": r.qsd_cov, "residual": ar.residual})
            except NotApplicableError as exc:
                block.append({"K": r.K, "error": str(exc)})
        summary["ar"] = block
    if "cycles" in exps:
        c = cfg.section("cycles")
        rep = cycle_support_study(base, K_list, cfg.seed, s["cycle_radius"], c["p0"], s["method"],
                                  c["burn_in"], c["max_period"], c["tol"])
        summary["cycle_support"] = rep.to_dict()
    out.json("sweep.json", summary)
    return status


def _retention_block(base, s, seed):
    if not mutual_invasibility(base):
        return {"error": "mutual invasibility fails; no invariant box"}
    found = find_invariant_box(base)
    if found is None:
        return {"error": "no invariant box found"}
    N = s["retention_N"]
    if N is None:
        cs = find_contracting_set(base)
        N = cs.N if cs is not None else 1
    K_list = s["retention_K_list"] or s["K_list"]
    sc = retention_scaling(base, found.box, N, K_list, s["retention_samples"], seed)
    return {
        "box": list(found.box),
        "N": N,
        "w_hat": sc.w_hat,
        "slope": sc.slope,
        "per_K": [{"K": r.K, "worst_retention": r.worst, "clopper_pearson_lower": r.lower_bound}
                  for r in sc.results],
    }


def cmd_cycles(cfg, out):
    p = cfg.model
    c = cfg.section("cycles")
    p0 = c["p0"]
    if p0 is None:
        fp = fixed_points(p).coexistence
        p0 = [fp.x + 0.1, fp.y - 0.05] if fp else [0.5 * p.r, 0.3 * p.r_tilde]
    cyc = detect_cycle(p, p0, c["burn_in"], c["max_period"], c["tol"])
    payload = {"p0": p0, "period": None if cyc is None else cyc.period}
    if cyc is not None:
        out.csv("cycle.csv", ["k", "x", "y"], ([k, x, y] for k, (x, y) in enumerate(cyc.points)))
    out.json("cycles.json", payload)
    return EXIT_OK


COMMANDS = {
    "analyze": cmd_analyze,
    "simulate": cmd_simulate,
    "qsd": cmd_qsd,
    "sweep": cmd_sweep,
    "cycles": cmd_cycles,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="stochricker", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", required=True, help="YAML or JSON run configuration")
    parser.add_argument("--seed", type=int, default=None, help="override the config seed")
    parser.add_argument("--out-dir", default="out", help="output directory (default: out)")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.seed)
        if args.command == "simulate" and "simulate" not in cfg.sections:
            raise ConfigError("simulate", "missing required section")
        if args.command == "sweep" and "sweep" not in cfg.sections:
            raise ConfigError("sweep", "missing required section")
        out = Writer(args.out_dir, cfg, args.command)
        return COMMANDS[args.command](cfg, out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NonConvergenceError, OrbitDivergenceError) as exc:
        print(f"non-convergence: {exc}", file=sys.stderr)
        return EXIT_NONCONVERGENCE
    except (InfeasibleError, CapTooSmallError) as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE


if __name__ == "__main__":
    sys.exit(main())
