"""Experiment drivers: each writes a CSV table and a JSON run manifest.

Every driver returns a :class:`RunResult` whose ``checks`` carry the pass/fail
verdict of each tolerance in the config's ``budgets`` block. CSV files end
with a ``manifest_hash`` column equal to the manifest's hash, which depends
only on the config and the package version, so reruns of the same config
produce identical hashes.
"""

from __future__ import annotations

import csv
import datetime as _dt
import hashlib
import json
import logging
import math
import os
import platform
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .config import ExperimentConfig
from .costs import (
    conjugate_closed_form,
    grid_sup_conjugate,
    legendre_derivative,
    legendre_eval,
    make_exponential_cost,
    make_inverse_cost,
    make_reciprocal_cost,
)
from .diffusion import ConstantControl, FeedbackFromSolution, ZeroControl, estimate_costs
from .hjb import (
    Classification,
    check_solution,
    classify_sweep,
    comparison_violation,
    locate_r_star,
    shoot_r_star,
    solve_zero_control,
    trichotomy_ok,
)
from .queueing import PatienceSpec, QueueParams, ServiceSpec, estimate_queue_cost

logger = logging.getLogger(__name__)

OUT_DIR_ENV = "QUEUECONTROL_OUT_DIR"
DEFAULT_OUT_DIR = "results"
AUTO_R_FACTORS = (0.0, 0.5, 0.9, 0.99, 1.01, 1.1, 1.5)
VERIFY_CONTROL_LEVELS = (0.0, 0.25, 1.0, 4.0)
SEED_STRIDE = 10_000_000


@dataclass
class Check:
    name: str
    passed: bool
    value: float
    threshold: float
    detail: str = ""


@dataclass
class RunResult:
    kind: str
    manifest: dict
    files: list = field(default_factory=list)
    checks: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)


def manifest_hash(cfg: ExperimentConfig) -> str:
    """sha256 over the config (minus the output location) and the package version."""
    d = cfg.to_dict()
    d["output"] = {k: v for k, v in d["output"].items() if k != "dir"}
    blob = json.dumps({"config": d, "version": __version__}, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()


def resolve_out_dir(cfg: ExperimentConfig, override: Optional[str] = None) -> Path:
    return Path(override or cfg.output.dir or os.environ.get(OUT_DIR_ENV) or DEFAULT_OUT_DIR)


def _write_csv(path: Path, header, rows, mhash: str) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(list(header) + ["manifest_hash"])
        for row in rows:
            w.writerow([_fmt(v) for v in row] + [mhash])
    return path


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def _finish(cfg: ExperimentConfig, out_dir: Path, files, checks, derived, started) -> RunResult:
    mhash = manifest_hash(cfg)
    manifest = {
        "kind": cfg.kind,
        "manifest_hash": mhash,
        "tool_version": __version__,
        "timestamp": _dt.datetime.now(_dt.timezone.utc).isoformat(),
        "elapsed_seconds": time.perf_counter() - started,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "workers": cfg.monte_carlo.workers,
        "config": cfg.to_dict(),
        "derived": _jsonable(derived),
        "checks": [_jsonable(asdict(c)) for c in checks],
        "all_passed": all(c.passed for c in checks),
        "files": [str(Path(f).name) for f in files],
    }
    mpath = out_dir / f"{cfg.kind}_manifest.json"
    mpath.parent.mkdir(parents=True, exist_ok=True)
    mpath.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    for c in checks:
        logger.info("%s %s: value=%.6g threshold=%.6g %s", "PASS" if c.passed else "FAIL",
                    c.name, c.value, c.threshold, c.detail)
    return RunResult(cfg.kind, manifest, list(files) + [mpath], list(checks))


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else str(v)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    return obj


# -- conjugate table ------------------------------------------------------------


def conjugate_rows(family: str, beta: float, n_points: int, grid_points: int):
    """Rows ``(family, y, F, F', brute force, |diff|, young residual)``."""
    if family == "exponential":
        cost = make_exponential_cost(beta)
        y_lo = 2.0 * cost.slope_at_zero
    elif family == "reciprocal":
        cost = make_reciprocal_cost()
        y_lo = 2.0 * cost.slope_at_zero
    else:
        cost = make_inverse_cost(allow_inadmissible=True)
        y_lo = -10.0
    y = np.linspace(y_lo, -1e-3, n_points)
    # anchor points worth reading off the table
    y = np.unique(np.concatenate((y, [-5.0, -1.0, -0.25] if family != "inverse" else [-1.0, -0.25])))
    y = y[(y >= y_lo) & (y < 0)]
    F = np.asarray(legendre_eval(cost, y))
    Fp = np.asarray(legendre_derivative(cost, y))
    if family == "inverse":
        u_max = 2.0 / math.sqrt(1e-3)
        with np.errstate(divide="ignore"):
            brute = grid_sup_conjugate(cost, y, u_max=u_max, n_grid=grid_points)
    else:
        brute = grid_sup_conjugate(cost, y, n_grid=grid_points)
    with np.errstate(divide="ignore"):
        young = np.abs(conjugate_closed_form(cost, y) - (y * Fp - np.asarray(cost.evaluate(Fp), dtype=float)))
    return [(family, yi, Fi, Fpi, bi, abs(Fi - bi), yr)
            for yi, Fi, Fpi, bi, yr in zip(y, F, Fp, brute, young)]


def run_conjugate_table(cfg: ExperimentConfig, out_dir: Optional[str] = None) -> RunResult:
    started = time.perf_counter()
    out = resolve_out_dir(cfg, out_dir)
    cj, b = cfg.conjugate, cfg.budgets
    rows, checks = [], []
    for fam in cj.families:
        r = conjugate_rows(fam, cj.beta, cj.n_points, cj.grid_points)
        rows.extend(r)
        diff = max(x[5] for x in r)
        young = max(x[6] for x in r)
        checks.append(Check(f"conjugate_vs_grid_sup[{fam}]", diff <= b.conjugate_tol, diff, b.conjugate_tol))
        checks.append(Check(f"young_identity[{fam}]", young <= b.young_tol, young, b.young_tol))
    mh = manifest_hash(cfg)
    f = _write_csv(out / "conjugate_table.csv",
                   ["family", "y", "F", "F_prime", "F_bruteforce", "abs_diff", "young_residual"], rows, mh)
    elapsed = time.perf_counter() - started
    return _finish(cfg, out, [f], checks, {"rows": len(rows), "seconds": elapsed}, started)


# -- solve ----------------------------------------------------------------------


def verification_gap(sol, levels=VERIFY_CONTROL_LEVELS) -> float:
    """Min over interior points and constant ``u`` of ``s2/2 Q'' - u Q' - theta x Q' - alpha Q + C(u)``."""
    P = sol.params
    h = sol.h
    x, Q, W = sol.x[1:-1], sol.Q[1:-1], sol.Qp[1:-1]
    Qpp = (sol.Q[2:] - 2 * Q + sol.Q[:-2]) / h ** 2
    base = P.half_var * Qpp - P.theta * x * W - P.alpha * Q
    return float(min(np.min(base - u * W + float(P.cost.evaluate(u))) for u in levels))


def run_solve(cfg: ExperimentConfig, out_dir: Optional[str] = None) -> RunResult:
    started = time.perf_counter()
    out = resolve_out_dir(cfg, out_dir)
    params, scfg = cfg.dcp.build(), replace(cfg.shooting.build(), residual_tol=cfg.budgets.residual_tol)
    sol = shoot_r_star(params, scfg)
    stride = cfg.output.csv_stride
    res = np.concatenate(([0.0], sol.residual, [0.0]))
    idx = np.arange(0, len(sol.x), stride)
    if idx[-1] != len(sol.x) - 1:
        idx = np.append(idx, len(sol.x) - 1)
    rows = [(sol.x[i], sol.Qp[i], sol.Q[i], sol.Qp[i], sol.ustar[i], res[i]) for i in idx]
    f = _write_csv(out / "solve.csv", ["x", "W", "Q", "Q_prime", "u_star", "hjb_residual"], rows, manifest_hash(cfg))
    vgap = verification_gap(sol)
    checks = [
        Check("hjb_residual", sol.max_residual <= cfg.budgets.residual_tol, sol.max_residual, cfg.budgets.residual_tol),
        Check("boundary_slope", sol.Qp[0] == -params.p, float(sol.Qp[0]), -params.p),
        Check("slope_bounds", bool(np.all(sol.Qp >= -params.p) and np.all(sol.Qp < 0)), float(sol.Qp.max()), 0.0),
        Check("strictly_decreasing", bool(np.all(np.diff(sol.Q) < 0)), float(np.diff(sol.Q).max()), 0.0),
        Check("convex", bool((sol.Q[2:] - 2 * sol.Q[1:-1] + sol.Q[:-2]).min() >= -1e-8),
              float((sol.Q[2:] - 2 * sol.Q[1:-1] + sol.Q[:-2]).min()), -1e-8),
        Check("verification_inequality", vgap >= -1e-6, vgap, -1e-6, f"u in {VERIFY_CONTROL_LEVELS}"),
    ]
    derived = {"r_star": sol.r_star, "r_bracket": sol.r_bracket, "Q0": sol.Q[0], "K_r_star": sol.K_r_star,
               "x_max": sol.x_max, "h": sol.h, "max_residual": sol.max_residual, "stages": len(sol.stages),
               "continuation_offset_total": sol.offset_total, "u_star_0": sol.ustar[0]}
    return _finish(cfg, out, [f], checks, derived, started)


# -- sweep ----------------------------------------------------------------------


def run_sweep_wr(cfg: ExperimentConfig, out_dir: Optional[str] = None) -> RunResult:
    started = time.perf_counter()
    out = resolve_out_dir(cfg, out_dir)
    params, scfg = cfg.dcp.build(), cfg.shooting.build()
    lo, hi = locate_r_star(params, scfg)
    r_star = lo
    r_list = cfg.sweep.r_list or [r_star * f for f in AUTO_R_FACTORS]
    outs = classify_sweep(params, scfg, r_list)
    stride = cfg.sweep.stride
    rows, summary = [], []
    for o in outs:
        idx = np.arange(0, len(o.x), stride)
        if idx[-1] != len(o.x) - 1:
            idx = np.append(idx, len(o.x) - 1)
        rows.extend((o.r, o.x[i], o.W[i], o.Wp[i], o.classification.value) for i in idx)
        summary.append((o.r, o.classification.value, o.x_event, o.crossing_slope))
    mh = manifest_hash(cfg)
    f1 = _write_csv(out / "sweep_wr.csv", ["r", "x", "W", "W_prime", "classification"], rows, mh)
    f2 = _write_csv(out / "sweep_wr_summary.csv", ["r", "classification", "x_event", "crossing_slope"], summary, mh)

    cls = [o.classification for o in outs]
    n_lm = sum(c is Classification.LOCAL_MAX for c in cls)
    n_hz = sum(c is Classification.HIT_ZERO for c in cls)
    first_hz = next((i for i, c in enumerate(cls) if c is Classification.HIT_ZERO), len(cls))
    interleaved = any(c is Classification.LOCAL_MAX for c in cls[first_hz:])
    viol = comparison_violation(outs)
    slopes = [o.crossing_slope for o in outs if o.classification is Classification.HIT_ZERO]
    min_slope = min(slopes) if slopes else math.inf
    checks = [
        Check("dichotomy", n_lm >= 1 and n_hz >= 1 and not interleaved, float(n_hz), 1.0,
              f"{n_lm} LocalMax, {n_hz} HitZero"),
        Check("comparison_ordering", viol <= cfg.budgets.comparison_tol, viol, cfg.budgets.comparison_tol),
        Check("non_tangential_crossing", min_slope > scfg.w_zero_tolerance, min_slope, scfg.w_zero_tolerance),
        Check("trichotomy", all(trichotomy_ok(o) for o in outs), 0.0, 0.0),
    ]
    derived = {"r_star": r_star, "r_bracket": (lo, hi), "r_list": list(r_list),
               "classifications": [c.value for c in cls], "x_max": scfg.resolved_x_max(params)}
    if cfg.sweep.check_refinement:
        lo2, _ = locate_r_star(params, replace(scfg, h=scfg.h / 2))
        shift = abs(lo2 - r_star)
        checks.append(Check("r_star_refinement", shift < 10 * scfg.r_tolerance, shift, 10 * scfg.r_tolerance,
                            f"r*(h/2)={lo2!r}"))
        derived["r_star_half_step"] = lo2
    return _finish(cfg, out, [f1, f2], checks, derived, started)


# -- verification by Monte Carlo --------------------------------------------------


def run_verify_dcp(cfg: ExperimentConfig, out_dir: Optional[str] = None) -> RunResult:
    started = time.perf_counter()
    out = resolve_out_dir(cfg, out_dir)
    params, scfg = cfg.dcp.build(), cfg.shooting.build()
    mc, b = cfg.monte_carlo, cfg.budgets
    sol = shoot_r_star(params, scfg)
    zsol = solve_zero_control(params, scfg)
    policies = [FeedbackFromSolution(sol), ZeroControl()]
    policies += [ConstantControl(float(c)) for c in mc.constant_levels if c != 0]
    est = estimate_costs(params, policies, mc.x0, mc.dt, mc.T, mc.n_paths, mc.seed, mc.workers, mc.scheme)
    Q0 = float(sol.value(mc.x0))
    identity = params.cost.cost_at_zero / params.alpha + params.p * float(zsol.value(mc.x0))
    k = b.se_multiplier
    checks, rows = [], []
    fb = est["feedback"]
    checks.append(Check("feedback_matches_value", abs(fb.mean - Q0) <= k * fb.se + b.mc_absolute,
                        abs(fb.mean - Q0), k * fb.se + b.mc_absolute))
    for pol in policies[1:]:
        e = est[pol.name]
        checks.append(Check(f"dominance[{pol.name}]", e.mean >= Q0 - k * e.se, e.mean - Q0, -k * e.se))
    z = est["zero"]
    checks.append(Check("zero_control_identity", abs(z.mean - identity) <= k * z.se + b.mc_absolute,
                        abs(z.mean - identity), k * z.se + b.mc_absolute))
    best_alt = min(est[p.name].mean for p in policies[1:])
    checks.append(Check("feedback_is_minimum", fb.mean <= best_alt + k * fb.se, fb.mean - best_alt, k * fb.se))
    for pol in policies:
        e = est[pol.name]
        checks.append(Check(f"fubini[{pol.name}]", e.fubini_ok(b.fubini_se_multiplier), e.fubini_gap,
                            b.fubini_se_multiplier * e.joint_se))
        ref = Q0 if pol.name != "zero" else identity
        rows.append((pol.name, e.mean, e.se, e.ci_half_width, e.tail_bound, e.n_paths, mc.dt, mc.T, mc.seed,
                     e.mean_rewritten, e.control_cost_mean, e.boundary_cost_mean, ref,
                     e.extras["clip_rate"], mc.scheme))
    rows.append(("identity_zero_control", identity, 0.0, 0.0, 0.0, 0, mc.dt, mc.T, mc.seed,
                 identity, params.cost.cost_at_zero / params.alpha, params.p * float(zsol.value(mc.x0)),
                 identity, 0.0, "ode"))
    f = _write_csv(out / "verify_dcp.csv",
                   ["policy", "mean", "se", "ci_half_width", "tail_bound", "n_paths", "dt", "T", "seed",
                    "mean_rewritten", "control_cost", "local_time_cost", "reference", "clip_rate", "scheme"],
                   rows, manifest_hash(cfg))
    derived = {"r_star": sol.r_star, "Q0": Q0, "U0": float(zsol.value(mc.x0)), "zero_identity": identity,
               "x_max": sol.x_max, "estimates": {k_: v.to_dict() for k_, v in est.items()}}
    return _finish(cfg, out, [f], checks, derived, started)


# -- queue convergence --------------------------------------------------------------


def second_moment_checks(n_list, second_moments, ratio_limit):
    """No monotone increase of ``E[Lhat(T)^2]`` along ``n`` and bounded max/min ratio."""
    m = np.asarray(second_moments, dtype=float)
    increasing = bool(np.all(np.diff(m) > 0))
    ratio = float(m.max() / m.min())
    return [
        Check("second_moment_not_monotone_increasing", not increasing, float(np.diff(m).min()), 0.0,
              f"E[Lhat^2] = {[round(v, 3) for v in m]} for n = {list(n_list)}"),
        Check("second_moment_ratio", ratio <= ratio_limit, ratio, ratio_limit),
    ]


def run_converge_qcp(cfg: ExperimentConfig, out_dir: Optional[str] = None) -> RunResult:
    started = time.perf_counter()
    out = resolve_out_dir(cfg, out_dir)
    params, scfg = cfg.dcp.build(), cfg.shooting.build()
    q, b, mc = cfg.queue, cfg.budgets, cfg.monte_carlo
    sol = shoot_r_star(params, scfg)
    Q0 = float(sol.value(q.x0_hat))
    service = ServiceSpec(q.service_family, q.service_variance)
    patience = PatienceSpec(params.theta, q.patience_scale)
    fb = FeedbackFromSolution(sol)
    rows, ests, checks = [], [], []
    for j, n in enumerate(q.n_list):
        qp = QueueParams(int(n), params, fb, q.x0_hat, service, patience, q.epsilon0)
        seed = mc.seed + j * SEED_STRIDE
        e = estimate_queue_cost(qp, q.T, q.n_paths, seed, mc.workers)
        ests.append(e)
        rows.append(_queue_row(n, "feedback", e, q, seed, Q0))
        checks.append(Check(f"fubini[n={n}]", e.fubini_ok(b.fubini_se_multiplier), e.fubini_gap,
                            b.fubini_se_multiplier * e.joint_se))
    gaps = [abs(e.mean - Q0) for e in ests]
    last = ests[-1]
    k = b.se_multiplier
    checks.append(Check("gap_shrinks", gaps[-1] <= gaps[0], gaps[-1], gaps[0]))
    checks.append(Check("final_gap_within_budget", gaps[-1] <= k * last.se + b.qcp_absolute,
                        gaps[-1], k * last.se + b.qcp_absolute))
    m2 = [e.extras["mean_Lhat_T_sq"] for e in ests]
    checks.extend(second_moment_checks(q.n_list, m2, b.second_moment_ratio))
    derived = {"r_star": sol.r_star, "Q0": Q0, "gaps": gaps, "second_moments": m2,
               "clamp_rates": [e.extras["clamp_rate"] for e in ests]}
    if q.zero_control_check:
        n = int(q.n_list[-1])
        qp = QueueParams(n, params, ZeroControl(), q.x0_hat, service, patience, q.epsilon0)
        seed = mc.seed + len(q.n_list) * SEED_STRIDE
        z = estimate_queue_cost(qp, q.T, q.n_paths, seed, mc.workers)
        rows.append(_queue_row(n, "zero", z, q, seed, Q0))
        checks.append(Check(f"zero_control_lower_bound[n={n}]", z.mean >= Q0 - k * z.se, z.mean - Q0, -k * z.se))
        derived["zero_control_final_n"] = z.mean
    f = _write_csv(out / "converge_qcp.csv",
                   ["n", "policy", "mean", "se", "ci_half_width", "mean_rewritten", "idle_cost_share",
                    "E_Lhat_T_sq", "se_Lhat_T_sq", "clamp_rate", "n_paths", "T", "seed", "reference", "gap"],
                   rows, manifest_hash(cfg))
    return _finish(cfg, out, [f], checks, derived, started)


def _queue_row(n, policy, e, q, seed, Q0):
    x = e.extras
    return (n, policy, e.mean, e.se, e.ci_half_width, e.mean_rewritten, x["idle_cost_share"], x["mean_Lhat_T_sq"],
            x["se_Lhat_T_sq"], x["clamp_rate"], e.n_paths, q.T, seed, Q0, abs(e.mean - Q0))


RUNNERS = {
    "sweep_wr": run_sweep_wr,
    "solve": run_solve,
    "verify_dcp": run_verify_dcp,
    "converge_qcp": run_converge_qcp,
    "conjugate_table": run_conjugate_table,
}


def run_experiment(cfg: ExperimentConfig, out_dir: Optional[str] = None) -> RunResult:
    return RUNNERS[cfg.kind](cfg, out_dir)
