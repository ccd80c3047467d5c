"""Text formats: epoch files, campaign configs and campaign reports.

Epoch file, one record per line, ``#`` starts a comment::

    lambda 1.9029367279836488e-01
    sats 5                      # tracked satellites, reference is index 0
    baselines 2
    xb 1 0 0 1                  # row-major min(3, A) x A, meters
    sigma_phase 3e-03           # optional undifferenced std, meters
    sigma_code 3e-01            # optional
    los <s> <x> <y> <z>         # s = 0..S
    dd <a> <s> <psi> <rho>      # a = 0..A-1, s = 1..S, cycles
    ntrue <a> <s> <int>         # optional true integers
    truth <yaw> <pitch> <roll>  # optional, radians

Campaign config: ``key = value`` lines; list-valued keys take comma-separated
values and span a grid of scenario cells.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import EpochFormatError
from .obs_model import (
    GPS_L1_WAVELENGTH,
    ArrayGeometry,
    Attitude,
    DdEpoch,
    LosSet,
    build_dd_covariance,
    build_design_matrix,
)
from .simulator import METHODS, ScenarioConfig
from .solver import SolverParams

DEFAULT_SIGMA_PHASE = 3e-3
DEFAULT_SIGMA_CODE = 0.3
_UNIT_TOL = 1e-12


def _fmt(x):
    return f"{x:.16e}"


@dataclass(frozen=True)
class EpochFile:
    """In-memory form of an epoch file."""

    wavelength: float
    los: np.ndarray            # (S+1, 3)
    xb: np.ndarray             # (q, A)
    psi: np.ndarray            # (S, A)
    rho: np.ndarray            # (S, A)
    sigma_phase: float | None = None
    sigma_code: float | None = None
    n_true: np.ndarray | None = None
    truth: tuple | None = None

    @property
    def n_sats(self):
        return len(self.los)

    @property
    def n_baselines(self):
        return self.xb.shape[1]

    def los_set(self) -> LosSet:
        return LosSet(self.los, self.wavelength)

    def geometry(self) -> ArrayGeometry:
        return ArrayGeometry(self.xb)

    def design_matrix(self):
        los = self.los_set()
        return build_design_matrix(los, min_rank=min(3, los.n_dd))

    def epoch(self) -> DdEpoch:
        sp = DEFAULT_SIGMA_PHASE if self.sigma_phase is None else self.sigma_phase
        sc = DEFAULT_SIGMA_CODE if self.sigma_code is None else self.sigma_code
        S, A = self.psi.shape
        q_psi, q_rho = build_dd_covariance(sp, sc, S, A, self.wavelength)
        return DdEpoch(self.psi, self.rho, q_psi, q_rho)

    def attitude(self) -> Attitude | None:
        return None if self.truth is None else Attitude(*self.truth)


def _numbers(tokens, lineno, kind=float):
    try:
        return [kind(t) for t in tokens]
    except ValueError:
        raise EpochFormatError(f"expected {kind.__name__} values, got {' '.join(tokens)!r}", lineno) from None


def parse_epoch(text: str) -> EpochFile:
    """Parse epoch-file text; raises :class:`EpochFormatError` with the line number."""
    header = {}
    los, dd, ntrue = {}, {}, {}
    truth = None
    arity = {"lambda": 1, "sats": 1, "baselines": 1, "sigma_phase": 1, "sigma_code": 1,
             "los": 4, "dd": 4, "ntrue": 3, "truth": 3}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        tokens = raw.split("#", 1)[0].split()
        if not tokens:
            continue
        key, args = tokens[0], tokens[1:]
        if key == "xb":
            if "xb" in header:
                raise EpochFormatError("duplicate xb line", lineno)
            header["xb"] = (_numbers(args, lineno), lineno)
            continue
        if key not in arity:
            raise EpochFormatError(f"unknown record {key!r}", lineno)
        if len(args) != arity[key]:
            raise EpochFormatError(f"{key} takes {arity[key]} fields, got {len(args)}", lineno)
        if key in ("sats", "baselines"):
            (value,) = _numbers(args, lineno, int)
            if key in header:
                raise EpochFormatError(f"duplicate {key} line", lineno)
            header[key] = (value, lineno)
        elif key in ("lambda", "sigma_phase", "sigma_code"):
            (value,) = _numbers(args, lineno)
            if key in header:
                raise EpochFormatError(f"duplicate {key} line", lineno)
            if not value > 0 or not math.isfinite(value):
                raise EpochFormatError(f"{key} must be positive and finite", lineno)
            header[key] = (value, lineno)
        elif key == "los":
            (s,) = _numbers(args[:1], lineno, int)
            vec = _numbers(args[1:], lineno)
            if s in los:
                raise EpochFormatError(f"duplicate los {s}", lineno)
            los[s] = (vec, lineno)
        elif key == "dd":
            a, s = _numbers(args[:2], lineno, int)
            vals = _numbers(args[2:], lineno)
            if (a, s) in dd:
                raise EpochFormatError(f"duplicate dd {a} {s}", lineno)
            dd[(a, s)] = (vals, lineno)
        elif key == "ntrue":
            a, s, n = _numbers(args, lineno, int)
            if (a, s) in ntrue:
                raise EpochFormatError(f"duplicate ntrue {a} {s}", lineno)
            ntrue[(a, s)] = (n, lineno)
        else:
            if truth is not None:
                raise EpochFormatError("duplicate truth line", lineno)
            truth = tuple(_numbers(args, lineno))

    for key in ("lambda", "sats", "baselines", "xb"):
        if key not in header:
            raise EpochFormatError(f"missing {key} line")
    n_sats, sats_line = header["sats"]
    A, base_line = header["baselines"]
    if n_sats < 2:
        raise EpochFormatError("sats must be at least 2", sats_line)
    if A < 1:
        raise EpochFormatError("baselines must be at least 1", base_line)
    S, q = n_sats - 1, min(3, A)
    xb_vals, xb_line = header["xb"]
    if len(xb_vals) != q * A:
        raise EpochFormatError(f"xb needs {q * A} values for {A} baselines", xb_line)
    xb = np.array(xb_vals, dtype=float).reshape(q, A)
    try:
        ArrayGeometry(xb)
    except ValueError as exc:
        raise EpochFormatError(str(exc), xb_line) from None

    vectors = np.empty((n_sats, 3))
    for s, (vec, lineno) in los.items():
        if not 0 <= s < n_sats:
            raise EpochFormatError(f"los index {s} outside 0..{S}", lineno)
        v = np.array(vec)
        norm = np.linalg.norm(v)
        if not norm > 0 or not np.all(np.isfinite(v)):
            raise EpochFormatError("los vector must be finite and nonzero", lineno)
        vectors[s] = v if abs(norm - 1.0) <= _UNIT_TOL else v / norm
    missing = sorted(set(range(n_sats)) - set(los))
    if missing:
        raise EpochFormatError(f"missing los lines for satellites {missing}")
    for s in range(1, n_sats):
        for t in range(s):
            if np.linalg.norm(np.cross(vectors[s], vectors[t])) <= 1e-6 and vectors[s] @ vectors[t] > 0:
                raise EpochFormatError(f"los {s} coincides with los {t}", los[s][1])

    psi, rho = np.empty((S, A)), np.empty((S, A))
    for (a, s), (vals, lineno) in dd.items():
        if not (0 <= a < A and 1 <= s <= S):
            raise EpochFormatError(f"dd index ({a}, {s}) outside baselines 0..{A - 1}, satellites 1..{S}", lineno)
        if not all(math.isfinite(v) for v in vals):
            raise EpochFormatError("dd values must be finite", lineno)
        psi[s - 1, a], rho[s - 1, a] = vals
    missing = sorted(set((a, s) for a in range(A) for s in range(1, S + 1)) - set(dd))
    if missing:
        raise EpochFormatError(f"missing dd lines for (baseline, satellite) {missing[:5]}")

    n_true = None
    if ntrue:
        n_true = np.zeros((S, A), dtype=np.int64)
        for (a, s), (n, lineno) in ntrue.items():
            if not (0 <= a < A and 1 <= s <= S):
                raise EpochFormatError(f"ntrue index ({a}, {s}) out of range", lineno)
            n_true[s - 1, a] = n
        if len(ntrue) != S * A:
            raise EpochFormatError("ntrue lines must cover every (baseline, satellite)")

    return EpochFile(
        wavelength=header["lambda"][0],
        los=vectors,
        xb=xb,
        psi=psi,
        rho=rho,
        sigma_phase=header.get("sigma_phase", (None,))[0],
        sigma_code=header.get("sigma_code", (None,))[0],
        n_true=n_true,
        truth=truth,
    )


def serialize_epoch(ef: EpochFile) -> str:
    """Canonical text form; ``serialize(parse(serialize(x)))`` equals ``serialize(x)``."""
    S, A = ef.psi.shape
    out = [f"lambda {_fmt(ef.wavelength)}", f"sats {ef.n_sats}", f"baselines {A}",
           "xb " + " ".join(_fmt(v) for v in ef.xb.ravel())]
    if ef.sigma_phase is not None:
        out.append(f"sigma_phase {_fmt(ef.sigma_phase)}")
    if ef.sigma_code is not None:
        out.append(f"sigma_code {_fmt(ef.sigma_code)}")
    out += [f"los {s} " + " ".join(_fmt(v) for v in ef.los[s]) for s in range(ef.n_sats)]
    out += [f"dd {a} {s} {_fmt(ef.psi[s - 1, a])} {_fmt(ef.rho[s - 1, a])}"
            for a in range(A) for s in range(1, S + 1)]
    if ef.n_true is not None:
        out += [f"ntrue {a} {s} {int(ef.n_true[s - 1, a])}" for a in range(A) for s in range(1, S + 1)]
    if ef.truth is not None:
        out.append("truth " + " ".join(_fmt(v) for v in ef.truth))
    return "\n".join(out) + "\n"


def read_epoch(path) -> EpochFile:
    return parse_epoch(Path(path).read_text())


def write_epoch(path, ef: EpochFile):
    Path(path).write_text(serialize_epoch(ef))


def epoch_file_from(los: LosSet, geometry: ArrayGeometry, epoch: DdEpoch, sigma_phase=None,
                    sigma_code=None, n_true=None, truth: Attitude | None = None) -> EpochFile:
    return EpochFile(
        wavelength=los.wavelength,
        los=np.array(los.vectors),
        xb=np.array(geometry.xb),
        psi=np.array(epoch.psi),
        rho=np.array(epoch.rho),
        sigma_phase=sigma_phase,
        sigma_code=sigma_code,
        n_true=None if n_true is None else np.asarray(n_true, dtype=np.int64),
        truth=None if truth is None else tuple(float(x) for x in truth.as_array()),
    )


# --------------------------------------------------------------------------
# campaign configuration
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class CampaignConfig:
    cells: list
    methods: tuple = ("proposed",)
    settings: dict = field(default_factory=dict)


_LIST_KEYS = {"sats": int, "baselines": int, "sigma_mm": float}
_SCALAR_KEYS = {
    "variance_ratio": float, "mask_deg": float, "trials": int, "seed": int,
    "baseline_length": float, "min_separation_deg": float, "elevation_weighting": "bool",
    "afm_step_deg": float, "cils_box": int, "wavelength": float,
}
_SOLVER_KEYS = {
    "K": int, "K_multi": int, "max_starts": int, "max_iter": int, "gap": float,
    "delta_theta_deg": float, "mode": str, "weighting": str, "tail_probability": float,
}


def _convert(kind, value, lineno, key):
    try:
        if kind == "bool":
            low = value.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError
            return low in ("true", "1", "yes")
        if kind in (int, float) and value.lower() == "none":
            return None
        return kind(value)
    except ValueError:
        raise EpochFormatError(f"bad value {value!r} for {key}", lineno) from None


def parse_config(text: str) -> CampaignConfig:
    """Parse a ``key = value`` campaign config into a grid of scenario cells."""
    lists = {"sats": [6], "baselines": [1], "sigma_mm": [3.0]}
    scalars, solver = {}, {}
    methods = ("proposed",)
    seen = set()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise EpochFormatError("expected key = value", lineno)
        key, value = (p.strip() for p in line.split("=", 1))
        if key in seen:
            raise EpochFormatError(f"duplicate key {key!r}", lineno)
        seen.add(key)
        if key in _LIST_KEYS:
            items = [v.strip() for v in value.split(",") if v.strip()]
            if not items:
                raise EpochFormatError(f"{key} needs at least one value", lineno)
            lists[key] = [_convert(_LIST_KEYS[key], v, lineno, key) for v in items]
        elif key in _SCALAR_KEYS:
            scalars[key] = _convert(_SCALAR_KEYS[key], value, lineno, key)
        elif key in _SOLVER_KEYS:
            solver[key] = _convert(_SOLVER_KEYS[key], value, lineno, key)
        elif key == "methods":
            methods = tuple(m.strip() for m in value.split(",") if m.strip())
            bad = [m for m in methods if m not in METHODS]
            if bad or not methods:
                raise EpochFormatError(f"unknown methods {bad}; choose from {list(METHODS)}", lineno)
        else:
            raise EpochFormatError(f"unknown key {key!r}", lineno)
    try:
        params = _solver_params(solver)
        base = ScenarioConfig(solver=params, **scalars)
        cells = [replace(base, n_sats=s, n_baselines=a, sigma_mm=float(sig))
                 for a in lists["baselines"] for s in lists["sats"] for sig in lists["sigma_mm"]]
    except ValueError as exc:
        raise EpochFormatError(str(exc)) from None
    settings = {**{k: v for k, v in lists.items()}, **scalars, **solver}
    return CampaignConfig(cells, methods, settings)


def _solver_params(solver):
    kw = dict(solver)
    if "delta_theta_deg" in kw:
        deg = kw.pop("delta_theta_deg")
        kw["delta_theta"] = None if deg is None else math.radians(deg)
    return SolverParams(**kw)


def read_config(path) -> CampaignConfig:
    return parse_config(Path(path).read_text())


# --------------------------------------------------------------------------
# reports
# --------------------------------------------------------------------------

def _config_echo(cfg: ScenarioConfig):
    p = cfg.solver
    return {
        "sats": cfg.n_sats,
        "dd_rows": cfg.n_dd,
        "baselines": cfg.n_baselines,
        "sigma_mm": cfg.sigma_mm,
        "variance_ratio": cfg.variance_ratio,
        "mask_deg": cfg.mask_deg,
        "trials": cfg.trials,
        "seed": cfg.seed,
        "baseline_length": cfg.baseline_length,
        "solver": {
            "K": p.K, "K_multi": p.K_multi, "max_starts": p.max_starts, "max_iter": p.max_iter,
            "gap": p.gap, "delta_theta_deg": None if p.delta_theta is None else math.degrees(p.delta_theta),
            "mode": p.mode, "weighting": p.weighting, "tail_probability": p.tail_probability,
        },
    }


def _record_dict(rec, include_timing):
    out = {"trial": rec.trial, "attitude_deg": list(rec.attitude_deg), "n_true": list(rec.n_true), "methods": {}}
    for m, o in rec.outcomes.items():
        d = {"success": o.success, "attitude_deg": o.attitude_deg and list(o.attitude_deg),
             "error_deg": o.error_deg and [None if math.isnan(x) else x for x in o.error_deg],
             "cost": o.cost, "error": o.error}
        if include_timing:
            d["wall_time"] = o.wall_time
        out["methods"][m] = d
    return out


def report_dict(report, methods, include_timing=False, verbose=False):
    cells = []
    for cell in report.cells:
        entry = {**_config_echo(cell.config),
                 "methods": {m: cell.methods[m].to_dict(include_timing) for m in methods},
                 "paired": cell.paired}
        if verbose:
            entry["records"] = [_record_dict(r, include_timing) for r in cell.records]
        cells.append(entry)
    return {"methods": list(methods), "cells": cells}


def report_json(report, methods, include_timing=False, verbose=False) -> str:
    return json.dumps(report_dict(report, methods, include_timing, verbose), indent=2, allow_nan=False) + "\n"


def _sigma_label(sig):
    return f"sigma_{sig:g}mm"


def success_rate_tables(report, methods) -> dict:
    """CSV text per baseline count: rows are satellite counts, columns noise levels."""
    tables = {}
    by_a = {}
    for cell in report.cells:
        by_a.setdefault(cell.config.n_baselines, []).append(cell)
    for a, cells in sorted(by_a.items()):
        sats = sorted({c.config.n_sats for c in cells})
        sigmas = sorted({c.config.sigma_mm for c in cells}, reverse=True)
        index = {(c.config.n_sats, c.config.sigma_mm): c for c in cells}
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["sats", "dd_rows", "method"] + [_sigma_label(s) for s in sigmas])
        for m in methods:
            for s in sats:
                row = []
                for sig in sigmas:
                    c = index.get((s, sig))
                    row.append("" if c is None else f"{c.methods[m].success_rate:.2f}")
                w.writerow([s, s - 1, m] + row)
        tables[a] = buf.getvalue()
    return tables


def error_cdf_csv(report, methods) -> str:
    """Sorted absolute Euler errors of every solved trial, per cell, method and angle."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["baselines", "sats", "sigma_mm", "method", "angle", "rank", "abs_error_deg", "success"])
    names = ("yaw", "pitch", "roll")
    for cell in report.cells:
        cfg = cell.config
        for m in methods:
            outs = [r.outcomes[m] for r in cell.records if r.outcomes[m].error_deg is not None]
            for i, name in enumerate(names):
                if cfg.n_baselines == 1 and name == "roll":
                    continue
                vals = sorted(((o.error_deg[i], o.success) for o in outs), key=lambda t: t[0])
                for rank, (v, ok) in enumerate(vals, start=1):
                    w.writerow([cfg.n_baselines, cfg.n_sats, f"{cfg.sigma_mm:g}", m, name, rank, repr(v), int(ok)])
    return buf.getvalue()


def paired_csv(report) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["baselines", "sats", "sigma_mm", "first", "second", "first_only", "second_only", "p_value_one_sided"])
    for cell in report.cells:
        cfg = cell.config
        for p in cell.paired:
            w.writerow([cfg.n_baselines, cfg.n_sats, f"{cfg.sigma_mm:g}", p["first"], p["second"],
                        p["first_only"], p["second_only"], repr(p["p_value_one_sided"])])
    return buf.getvalue()


def campaign_outputs(report, methods, include_timing=False, verbose=False) -> dict:
    """File name to text for every report file of a campaign."""
    files = {"report.json": report_json(report, methods, include_timing, verbose)}
    for a, text in success_rate_tables(report, methods).items():
        files[f"success_rate_A{a}.csv"] = text
    files["error_cdf.csv"] = error_cdf_csv(report, methods)
    if any(cell.paired for cell in report.cells):
        files["paired.csv"] = paired_csv(report)
    return files


__all__ = [
    "GPS_L1_WAVELENGTH",
    "CampaignConfig",
    "EpochFile",
    "campaign_outputs",
    "epoch_file_from",
    "parse_config",
    "parse_epoch",
    "read_config",
    "read_epoch",
    "serialize_epoch",
    "write_epoch",
]
