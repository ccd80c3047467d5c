"""Command-line front end: ``cwls solve``, ``cwls campaign`` and ``cwls selftest``."""

from __future__ import annotations

import argparse
import itertools
import json
import math
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
from scipy.stats import special_ortho_group

from . import formats, objective
from .circles import intersect_arrays
from .errors import CwlsError, EpochFormatError
from .objective import ambiguity_from_rotation
from .obs_model import (
    ArrayGeometry,
    DdEpoch,
    LosSet,
    build_dd_covariance,
    build_design_matrix,
    direction_to_euler,
    geodesic_angle,
    rotation_to_euler,
    wrap_angle,
)
from .reference import OracleInput, afm_grid_search, brute_force_cils, oracle_solver
from .simulator import METHODS, ScenarioConfig, draw_trial, run_grid
from .solver import SolverParams, solve, wahba_orthogonalize

EXIT_OK, EXIT_PARSE, EXIT_SOLVER = 0, 1, 2


def _solver_params(args) -> SolverParams:
    kw = {"mode": args.mode, "weighting": args.weighting}
    if args.K is not None:
        kw["K"] = args.K
    if args.delta_theta_deg is not None:
        kw["delta_theta"] = math.radians(args.delta_theta_deg)
    return SolverParams(**kw)


def _euler(R, q):
    return direction_to_euler(R[:, 0]) if q == 1 else rotation_to_euler(R)


def _solve_file(ef: formats.EpochFile, args):
    H = ef.design_matrix()
    geometry = ef.geometry()
    epoch = ef.epoch()
    params = _solver_params(args)
    method = "oracle" if args.oracle else args.method
    diag = {}
    if method == "proposed":
        rep = solve(epoch, H, geometry, params)
        R, att, amb, cost = rep.rotation, rep.attitude, rep.ambiguities, rep.cost
        diag = rep.diagnostics()
    elif method == "afm":
        rep = afm_grid_search(epoch, H, geometry, math.radians(args.afm_step_deg), weighting=args.weighting)
        R, att, amb, cost = rep.rotation, rep.attitude, rep.ambiguities, rep.cost
        diag = rep.diagnostics()
    elif method == "oracle":
        if ef.n_true is None:
            raise EpochFormatError("the oracle needs ntrue lines")
        res = oracle_solver(OracleInput(epoch, H, geometry, ef.n_true), args.mode, args.weighting)
        R, att, cost = res.rotation, res.attitude, res.cost
        amb = ambiguity_from_rotation(R, epoch.psi, H, geometry.xb)
        diag = {"converged": res.converged}
    else:
        res = brute_force_cils(epoch, H, geometry, args.box, mode=args.mode, weighting=args.weighting)
        R, amb, cost = res.rotation, res.ambiguities, res.cost
        att = _euler(R, geometry.q)
        diag = {"exhaustive": res.exhaustive, "enumerated": res.n_enumerated}
    R = np.asarray(R).reshape(3, geometry.q)
    out = {
        "method": method,
        "attitude_deg": dict(zip(("yaw", "pitch", "roll"), (float(x) for x in att.degrees()))),
        "attitude_rad": dict(zip(("yaw", "pitch", "roll"), (float(x) for x in att.as_array()))),
        "rotation": R.tolist(),
        "ambiguities": np.asarray(amb, dtype=np.int64).tolist(),
        "cost": float(cost),
        "diagnostics": _jsonable(diag),
    }
    if geometry.q == 1:
        out["attitude_deg"]["roll"] = None
        out["attitude_rad"]["roll"] = None
    truth = ef.attitude()
    if truth is not None:
        err = np.abs(wrap_angle(att.as_array() - truth.as_array()))
        if geometry.q == 1:
            err = err[:2]
        out["euler_error_rad"] = [float(x) for x in err]
        out["attitude_error_rad"] = float(geodesic_angle(R, truth.rotation(geometry.q)))
    if ef.n_true is not None:
        out["ambiguities_correct"] = bool(np.array_equal(amb, ef.n_true))
    return out


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (float, np.floating)):
        x = float(x)
        return x if math.isfinite(x) else None
    if isinstance(x, np.bool_):
        return bool(x)
    return x


def cmd_solve(args):
    try:
        ef = formats.read_epoch(args.path)
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except EpochFormatError as exc:
        print(f"error: {args.path}: {exc}", file=sys.stderr)
        return EXIT_PARSE
    try:
        out = _solve_file(ef, args)
    except EpochFormatError as exc:
        print(f"error: {args.path}: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except (CwlsError, ValueError) as exc:
        print(f"solver failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    json.dump(out, sys.stdout, indent=2)
    sys.stdout.write("\n")
    return EXIT_OK


def cmd_campaign(args):
    try:
        cfg = formats.read_config(args.config)
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except EpochFormatError as exc:
        print(f"error: {args.config}: {exc}", file=sys.stderr)
        return EXIT_PARSE
    methods = cfg.methods
    if args.methods:
        methods = tuple(m.strip() for m in args.methods.split(",") if m.strip())
        bad = [m for m in methods if m not in METHODS]
        if bad or not methods:
            print(f"error: unknown methods {bad}; choose from {list(METHODS)}", file=sys.stderr)
            return EXIT_PARSE
    cells = cfg.cells
    if args.trials is not None:
        cells = [replace(c, trials=args.trials) for c in cells]
    if args.seed is not None:
        cells = [replace(c, seed=args.seed) for c in cells]
    out = Path(args.out)
    names = ["report.json", "error_cdf.csv", "paired.csv"] + [
        f"success_rate_A{a}.csv" for a in sorted({c.n_baselines for c in cells})]
    existing = [n for n in names if (out / n).exists()]
    if existing and not args.force:
        print(f"error: {out} already holds {', '.join(existing)}; pass --force to overwrite", file=sys.stderr)
        return EXIT_PARSE

    def progress(cell_cfg, cell):
        if args.quiet:
            return
        rates = ", ".join(f"{m} {cell.methods[m].success_rate:.1f}%" for m in methods)
        print(f"A={cell_cfg.n_baselines} sats={cell_cfg.n_sats} sigma={cell_cfg.sigma_mm:g} mm: {rates}",
              file=sys.stderr)

    report = run_grid(cells, methods, keep_records=True, progress=progress)
    files = formats.campaign_outputs(report, methods, args.timing, args.verbose)
    out.mkdir(parents=True, exist_ok=True)
    for name, text in files.items():
        (out / name).write_text(text)
    if not args.quiet:
        print(f"wrote {', '.join(sorted(files))} to {out}", file=sys.stderr)
    return EXIT_OK


# --------------------------------------------------------------------------
# selftest
# --------------------------------------------------------------------------

def _check_wrap():
    w = objective.wrap
    x = np.array([0.5, -0.5, 1.5, -1.5, 0.25, -0.75, 2.0, 1e6 + 0.5])
    expect = np.array([0.5, 0.5, 0.5, 0.5, 0.25, 0.25, 0.0, 0.5])
    got = np.asarray(w(x))
    rng = np.random.default_rng(0)
    y = rng.uniform(-50, 50, 1000)
    k = rng.integers(-20, 21, 1000)
    shifted = np.asarray(w(y + k))
    inside = np.all((shifted > -0.5) & (shifted <= 0.5))
    return (np.allclose(got, expect, rtol=0, atol=1e-9) and inside
            and np.allclose(shifted, np.asarray(w(y)), rtol=0, atol=1e-9))


def _check_intersections():
    rng = np.random.default_rng(1)
    us = rng.normal(size=(2000, 3))
    us /= np.linalg.norm(us, axis=1, keepdims=True)
    um = rng.normal(size=(2000, 3))
    um /= np.linalg.norm(um, axis=1, keepdims=True)
    cs, cm = rng.uniform(-1, 1, 2000), rng.uniform(-1, 1, 2000)
    q1, q2, *_, crossing = intersect_arrays(us, um, cs, cm, 1e-3)
    ok = True
    for q in (q1[crossing], q2[crossing]):
        ok &= np.all(np.abs(np.sum(q * us[crossing], 1) - cs[crossing]) < 1e-10)
        ok &= np.all(np.abs(np.sum(q * um[crossing], 1) - cm[crossing]) < 1e-10)
        ok &= np.all(np.abs(np.linalg.norm(q, axis=1) - 1) < 1e-12)
    return bool(ok) and crossing.any()


def _check_wahba():
    rng = np.random.default_rng(2)
    for _ in range(50):
        M = rng.normal(size=(3, 3))
        R = wahba_orthogonalize(M)
        Q = special_ortho_group.rvs(3, size=2000, random_state=rng)
        best = np.min(np.linalg.norm(Q - M, axis=(1, 2)))
        if np.linalg.norm(R - M) > best + 1e-12:
            return False
        if np.linalg.norm(R.T @ R - np.eye(3)) > 1e-10 or np.linalg.det(R) < 0:
            return False
    return True


def _check_wrapped_minimum():
    rng = np.random.default_rng(3)
    for _ in range(30):
        S = int(rng.integers(3, 5))
        v = rng.normal(size=(S + 1, 3))
        v[:, 2] = np.abs(v[:, 2]) + 0.2
        H = build_design_matrix(LosSet.from_vectors(v))
        geo = ArrayGeometry.single(1.0)
        q_psi, q_rho = build_dd_covariance(3e-3, 0.3, S, 1)
        q_psi = np.diag(np.diag(q_psi))
        psi = rng.uniform(-20, 20, (S, 1))
        ep = DdEpoch(psi, psi, q_psi, q_rho)
        r = rng.normal(size=3)
        r /= np.linalg.norm(r)
        pred = H.H @ r
        w = 1.0 / np.diag(q_psi)
        center = np.round(psi[:, 0] - pred)
        best = min(np.sum(w * (psi[:, 0] - pred - center - np.array(d)) ** 2)
                   for d in itertools.product(range(-3, 4), repeat=S))
        got = objective.cwls_objective(r, ep, H, geo.xb, mode="phase_only", weighting="diagonal")
        if abs(got - best) > 1e-10 * max(1.0, best):
            return False
    return True


def _check_noise_free():
    for a in (1, 3):
        cfg = ScenarioConfig(n_sats=6, n_baselines=a, sigma_mm=0.0, trials=5)
        for t in range(5):
            _, H, att, epoch, n_true = draw_trial(cfg, t)
            rep = solve(epoch, H, cfg.geometry())
            if not np.array_equal(rep.ambiguities, n_true):
                return False
    return True


SELFTESTS = (
    ("wrap convention", _check_wrap),
    ("circle intersection oracle", _check_intersections),
    ("nearest rotation optimality", _check_wahba),
    ("wrapped cost equals integer minimum", _check_wrapped_minimum),
    ("noise-free recovery", _check_noise_free),
)


def cmd_selftest(args):
    t0 = time.perf_counter()
    failures = 0
    for name, check in SELFTESTS:
        try:
            ok = bool(check())
        except Exception as exc:  # a crash counts as a failure, keep going
            ok = False
            name = f"{name} ({type(exc).__name__}: {exc})"
        failures += not ok
        print(f"{'PASS' if ok else 'FAIL'}  {name}")
    elapsed = time.perf_counter() - t0
    print(f"{len(SELFTESTS) - failures}/{len(SELFTESTS)} passed in {elapsed:.1f} s")
    return 0 if failures == 0 else 1


def build_parser():
    p = argparse.ArgumentParser(prog="cwls", description="GNSS attitude determination by constrained wrapped least squares")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("solve", help="solve one epoch file, JSON report on stdout")
    s.add_argument("path")
    s.add_argument("--method", choices=METHODS, default="proposed")
    s.add_argument("--oracle", action="store_true", help="use the true integers from ntrue lines")
    s.add_argument("--mode", choices=objective.MODES, default="phase_and_code")
    s.add_argument("--weighting", choices=objective.WEIGHTINGS, default="full")
    s.add_argument("--K", type=int, default=None)
    s.add_argument("--delta-theta-deg", type=float, default=None)
    s.add_argument("--afm-step-deg", type=float, default=2.0)
    s.add_argument("--box", type=int, default=3, help="integer box radius for the cils method")
    s.set_defaults(func=cmd_solve)

    c = sub.add_parser("campaign", help="run a Monte Carlo campaign from a key=value config")
    c.add_argument("config")
    c.add_argument("--methods", default=None, help=f"comma-separated subset of {','.join(METHODS)}")
    c.add_argument("--trials", type=int, default=None)
    c.add_argument("--seed", type=int, default=None)
    c.add_argument("--out", default="campaign_out")
    c.add_argument("--force", action="store_true", help="overwrite existing report files")
    c.add_argument("--timing", action="store_true", help="include wall times (breaks byte-identical reruns)")
    c.add_argument("--verbose", action="store_true", help="include per-trial records in report.json")
    c.add_argument("--quiet", action="store_true")
    c.set_defaults(func=cmd_campaign)

    t = sub.add_parser("selftest", help="fast invariant checks")
    t.set_defaults(func=cmd_selftest)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
