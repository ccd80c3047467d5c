"""Synthetic constellations, noisy double-difference epochs and Monte Carlo campaigns.

Every trial draws from two independent random streams keyed on
``(seed, tracked satellites, trial)``:

* the geometry stream yields the constellation and the true attitude, so
  all noise levels and baseline counts of a campaign share them;
* the observation stream yields the integers and the standard normal
  noise, scaled by the noise level afterwards, so noise levels differ only
  by scale (common random numbers).

Results are therefore independent of scheduling and worker count.
"""

from __future__ import annotations

import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy import stats

from .errors import CwlsError, DegenerateGeometry
from .obs_model import (
    GPS_L1_WAVELENGTH,
    ArrayGeometry,
    Attitude,
    DdEpoch,
    LosSet,
    build_dd_covariance,
    build_design_matrix,
    dd_operator,
    direction_to_euler,
    geodesic_angle,
    rotation_to_euler,
    wrap_angle,
)
from .objective import ambiguity_from_rotation
from .reference import OracleInput, afm_grid_search, brute_force_cils, oracle_solver
from .solver import SolverParams, solve

METHODS = ("proposed", "afm", "oracle", "cils")

# noise level assumed by the weighting when a scenario is noise-free
_FALLBACK_SIGMA = 1e-3


# --------------------------------------------------------------------------
# scenario generation
# --------------------------------------------------------------------------

def gen_constellation(n_tracked, mask_deg, rng, min_separation_deg=2.0,
                      wavelength=GPS_L1_WAVELENGTH, max_retries=1000) -> LosSet:
    """Cap-uniform line-of-sight vectors above an elevation mask.

    Satellites are drawn one by one; a draw closer than the minimum
    separation to an accepted satellite is rejected. After ``max_retries``
    rejections for one satellite the separation is halved. The highest
    satellite becomes the reference (index 0).
    """
    if n_tracked < 2:
        raise ValueError("need at least two tracked satellites")
    if not 0.0 <= mask_deg < 90.0:
        raise ValueError("elevation mask must lie in [0, 90) degrees")
    lo = math.sin(math.radians(mask_deg))
    cos_sep = math.cos(math.radians(min_separation_deg))
    accepted = []
    for _ in range(n_tracked):
        tries = 0
        while True:
            az = rng.uniform(0.0, 2.0 * np.pi)
            el = math.asin(rng.uniform(lo, 1.0))
            v = np.array([math.cos(el) * math.sin(az), math.cos(el) * math.cos(az), math.sin(el)])
            if all(v @ u < cos_sep for u in accepted):
                accepted.append(v)
                break
            tries += 1
            if tries >= max_retries:
                cos_sep = math.cos(0.5 * math.acos(cos_sep))
                tries = 0
    vectors = np.array(accepted)
    top = int(np.argmax(vectors[:, 2]))
    order = [top] + [i for i in range(n_tracked) if i != top]
    return LosSet.from_vectors(vectors[order], wavelength)


def random_attitude(rng, n_baselines=3) -> Attitude:
    """Uniform yaw and roll on (-pi, pi], pitch on [-pi/2, pi/2]; no roll for one baseline."""
    yaw, pitch, roll = rng.uniform(-np.pi, np.pi), rng.uniform(-np.pi / 2, np.pi / 2), rng.uniform(-np.pi, np.pi)
    return Attitude(yaw, pitch, roll if n_baselines > 1 else 0.0)


def synthesize_epoch(R_true, geometry: ArrayGeometry, los: LosSet, sigma_phase, sigma_code, rng,
                     n_true=None, elevation_weighting=False, weight_sigmas=None):
    """Noisy double-difference epoch with known integers.

    ``sigma_phase`` and ``sigma_code`` are undifferenced standard deviations in
    meters; undifferenced noise is pushed through the differencing operator.
    ``weight_sigmas`` overrides the sigmas used to build the covariance, which
    is needed for noise-free epochs. Returns ``(epoch, n_true)``.
    """
    S, A = los.n_dd, geometry.n_baselines
    H = build_design_matrix(los, min_rank=min(3, S))
    if n_true is None:
        n_true = rng.integers(-100, 101, size=(S, A))
    n_true = np.asarray(n_true, dtype=np.int64).reshape(S, A)
    z_phase = rng.standard_normal((A + 1, S + 1))
    z_code = rng.standard_normal((A + 1, S + 1))
    el = los.elevations if elevation_weighting else None
    scale = 1.0 / np.sin(el) if elevation_weighting else np.ones(S + 1)
    D = dd_operator(S, A)
    lam = los.wavelength
    eta = (D @ (sigma_phase / lam * z_phase * scale).ravel()).reshape(S, A, order="F")
    eps = (D @ (sigma_code / lam * z_code * scale).ravel()).reshape(S, A, order="F")
    wp, wc = weight_sigmas if weight_sigmas is not None else (sigma_phase, sigma_code)
    if wp <= 0 or wc <= 0:
        wp, wc = _FALLBACK_SIGMA, _FALLBACK_SIGMA * 100.0
    q_psi, q_rho = build_dd_covariance(wp, wc, S, A, lam, elevations=el)
    clean = H.H @ np.reshape(R_true, (3, geometry.q)) @ geometry.xb
    return DdEpoch(clean + n_true + eta, clean + eps, q_psi, q_rho), n_true


# --------------------------------------------------------------------------
# configuration and records
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class ScenarioConfig:
    """One Monte Carlo cell.

    ``n_sats`` counts tracked satellites, so the epoch has ``n_sats - 1``
    double-difference rows. ``sigma_mm`` is the undifferenced phase noise;
    the code noise follows from ``variance_ratio``.
    """

    n_sats: int = 6
    n_baselines: int = 1
    sigma_mm: float = 3.0
    variance_ratio: float = 1e4
    mask_deg: float = 10.0
    trials: int = 10_000
    seed: int = 0
    baseline_length: float = 1.0
    xb: tuple | None = None
    wavelength: float = GPS_L1_WAVELENGTH
    min_separation_deg: float = 2.0
    elevation_weighting: bool = False
    solver: SolverParams = field(default_factory=SolverParams)
    afm_step_deg: float = 2.0
    cils_box: int = 3

    def __post_init__(self):
        if self.sigma_mm < 0:
            raise ValueError("sigma_mm must be non-negative")
        if not 0.0 <= self.mask_deg < 90.0:
            raise ValueError("mask_deg must lie in [0, 90)")
        if self.trials < 1:
            raise ValueError("trials must be at least 1")
        if self.n_sats < 2:
            raise ValueError("need at least two tracked satellites")
        if self.n_baselines < 1:
            raise ValueError("need at least one baseline")

    @property
    def n_dd(self):
        return self.n_sats - 1

    @property
    def sigma_phase(self):
        return self.sigma_mm * 1e-3

    @property
    def sigma_code(self):
        return self.sigma_phase * math.sqrt(self.variance_ratio)

    def geometry(self) -> ArrayGeometry:
        if self.xb is not None:
            return ArrayGeometry(np.array(self.xb, dtype=float))
        if self.n_baselines == 1:
            return ArrayGeometry.single(self.baseline_length)
        return ArrayGeometry.orthogonal(self.n_baselines, self.baseline_length)


@dataclass(frozen=True)
class MethodOutcome:
    success: bool
    attitude_deg: tuple | None = None
    error_deg: tuple | None = None
    cost: float | None = None
    pool_size: int | None = None
    circles_per_satellite: float | None = None
    degraded: bool = False
    error: str | None = None
    exhaustive: bool | None = None
    wall_time: float = 0.0


@dataclass(frozen=True)
class TrialRecord:
    trial: int
    n_sats: int
    n_baselines: int
    sigma_mm: float
    attitude_deg: tuple
    n_true: tuple
    outcomes: dict


def trial_streams(seed, n_sats, n_baselines, trial):
    """Geometry and observation generators for one trial."""
    geo = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(n_sats, trial, 0)))
    obs = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(n_sats, trial, 1, n_baselines)))
    return geo, obs


def draw_trial(cfg: ScenarioConfig, trial: int):
    """Constellation, truth and epoch of one trial: ``(los, H, attitude, epoch, n_true)``."""
    geo_rng, obs_rng = trial_streams(cfg.seed, cfg.n_sats, cfg.n_baselines, trial)
    geometry = cfg.geometry()
    while True:
        los = gen_constellation(cfg.n_sats, cfg.mask_deg, geo_rng, cfg.min_separation_deg, cfg.wavelength)
        try:
            H = build_design_matrix(los, min_rank=min(3, los.n_dd))
            break
        except DegenerateGeometry:
            continue
    att = random_attitude(geo_rng, cfg.n_baselines)
    epoch, n_true = synthesize_epoch(
        att.rotation(geometry.q), geometry, los, cfg.sigma_phase, cfg.sigma_code, obs_rng,
        elevation_weighting=cfg.elevation_weighting,
    )
    return los, H, att, epoch, n_true


def _euler_errors(est: Attitude, truth: Attitude, n_baselines):
    d = np.abs(wrap_angle(est.as_array() - truth.as_array()))
    if n_baselines == 1:
        d[2] = np.nan
    return tuple(float(x) for x in np.rad2deg(d))


def _run_method(method, cfg, H, geometry, epoch, n_true, att):
    t0 = time.perf_counter()
    try:
        extra = {}
        if method == "proposed":
            rep = solve(epoch, H, geometry, cfg.solver)
            est, amb, cost = rep.attitude, rep.ambiguities, rep.cost
            extra = dict(pool_size=int(sum(rep.pool_sizes)), circles_per_satellite=rep.circles_per_satellite,
                         degraded=rep.degraded)
        elif method == "afm":
            rep = afm_grid_search(epoch, H, geometry, np.deg2rad(cfg.afm_step_deg),
                                  weighting=cfg.solver.weighting)
            est, amb, cost = rep.attitude, rep.ambiguities, rep.cost
            extra = dict(pool_size=int(rep.pool_sizes[0]))
        elif method == "oracle":
            res = oracle_solver(OracleInput(epoch, H.H, geometry, n_true), cfg.solver.mode, cfg.solver.weighting)
            est, cost = res.attitude, res.cost
            amb = ambiguity_from_rotation(res.rotation, epoch.psi, H, geometry.xb)
        elif method == "cils":
            res = brute_force_cils(epoch, H, geometry, cfg.cils_box, R_init=att.rotation(geometry.q),
                                   mode=cfg.solver.mode, weighting=cfg.solver.weighting)
            R = res.rotation
            est = direction_to_euler(R[:, 0]) if geometry.q == 1 else rotation_to_euler(R)
            amb, cost = res.ambiguities, res.cost
            extra = dict(exhaustive=res.exhaustive)
        else:
            raise ValueError(f"unknown method {method!r}")
    except CwlsError as exc:
        return MethodOutcome(False, error=type(exc).__name__, wall_time=time.perf_counter() - t0)
    return MethodOutcome(
        success=bool(np.array_equal(amb, n_true)),
        attitude_deg=tuple(float(x) for x in est.degrees()),
        error_deg=_euler_errors(est, att, geometry.n_baselines),
        cost=float(cost),
        wall_time=time.perf_counter() - t0,
        **extra,
    )


def run_trial(cfg: ScenarioConfig, trial: int, methods=("proposed",)) -> TrialRecord:
    los, H, att, epoch, n_true = draw_trial(cfg, trial)
    geometry = cfg.geometry()
    outcomes = {m: _run_method(m, cfg, H, geometry, epoch, n_true, att) for m in methods}
    return TrialRecord(trial, cfg.n_sats, cfg.n_baselines, cfg.sigma_mm,
                       tuple(float(x) for x in att.degrees()), tuple(int(x) for x in n_true.ravel(order="F")),
                       outcomes)


# --------------------------------------------------------------------------
# aggregation
# --------------------------------------------------------------------------

def wilson_interval(successes, trials, confidence=0.95):
    """Wilson score interval for a binomial proportion, in percent."""
    if trials == 0:
        return (0.0, 100.0)
    ci = stats.binomtest(int(successes), int(trials)).proportion_ci(confidence, method="wilson")
    return (100.0 * ci.low, 100.0 * ci.high)


@dataclass(frozen=True)
class MethodSummary:
    trials: int
    successes: int
    success_rate: float
    ci95: tuple
    rmse_deg: dict | None
    mean_pool_size: float | None
    mean_circles_per_satellite: float | None
    degraded: int
    errors: dict
    mean_wall_time: float

    def to_dict(self, include_timing=False):
        d = asdict(self)
        d["ci95"] = list(self.ci95)
        if self.rmse_deg is None:
            del d["rmse_deg"]
        if not include_timing:
            del d["mean_wall_time"]
        return d


def summarize(records, method) -> MethodSummary:
    outs = [r.outcomes[method] for r in records]
    n = len(outs)
    ok = [o for o in outs if o.success]
    rmse = None
    if ok:
        err = np.array([o.error_deg for o in ok], dtype=float)
        names = ("yaw", "pitch", "roll")
        rmse = {names[i]: float(np.sqrt(np.mean(err[:, i] ** 2)))
                for i in range(3) if not np.all(np.isnan(err[:, i]))}
    pools = [o.pool_size for o in outs if o.pool_size is not None]
    circ = [o.circles_per_satellite for o in outs if o.circles_per_satellite is not None]
    errors = {}
    for o in outs:
        if o.error:
            errors[o.error] = errors.get(o.error, 0) + 1
    return MethodSummary(
        trials=n,
        successes=len(ok),
        success_rate=100.0 * len(ok) / n,
        ci95=wilson_interval(len(ok), n),
        rmse_deg=rmse,
        mean_pool_size=float(np.mean(pools)) if pools else None,
        mean_circles_per_satellite=float(np.mean(circ)) if circ else None,
        degraded=sum(o.degraded for o in outs),
        errors=dict(sorted(errors.items())),
        mean_wall_time=float(np.mean([o.wall_time for o in outs])),
    )


def paired_test(records, first, second):
    """Exact McNemar test that ``first`` succeeds more often than ``second``."""
    b = sum(r.outcomes[first].success and not r.outcomes[second].success for r in records)
    c = sum(r.outcomes[second].success and not r.outcomes[first].success for r in records)
    p = stats.binomtest(b, b + c, 0.5, alternative="greater").pvalue if b + c else 1.0
    return {"first": first, "second": second, "first_only": int(b), "second_only": int(c),
            "p_value_one_sided": float(p)}


@dataclass(frozen=True)
class CellReport:
    config: ScenarioConfig
    methods: dict
    paired: list
    records: list = field(default_factory=list, repr=False)


@dataclass(frozen=True)
class CampaignReport:
    cells: list

    def cell(self, n_sats, n_baselines, sigma_mm):
        for c in self.cells:
            cfg = c.config
            if (cfg.n_sats, cfg.n_baselines, cfg.sigma_mm) == (n_sats, n_baselines, sigma_mm):
                return c
        raise KeyError((n_sats, n_baselines, sigma_mm))


# --------------------------------------------------------------------------
# execution
# --------------------------------------------------------------------------

def worker_count():
    """Worker processes allowed by ``CWLS_THREADS`` (0 or unset: all CPUs)."""
    raw = os.environ.get("CWLS_THREADS", "0").strip() or "0"
    n = int(raw)
    cpus = os.cpu_count() or 1
    return cpus if n <= 0 else min(n, cpus)


def _run_chunk(args):
    cfg, trials, methods = args
    return [run_trial(cfg, t, methods) for t in trials]


def _run_trials(jobs, workers):
    """Run ``(cfg, trial, methods)`` jobs; results keep the job order."""
    if workers <= 1 or len(jobs) <= 1:
        return [run_trial(cfg, t, m) for cfg, t, m in jobs]
    chunks = []
    size = max(1, len(jobs) // (8 * workers))
    for i in range(0, len(jobs), size):
        part = jobs[i:i + size]
        # jobs within a chunk share config and methods by construction
        groups = {}
        for cfg, t, m in part:
            groups.setdefault((cfg, m), []).append(t)
        chunks.extend((cfg, ts, m) for (cfg, m), ts in groups.items())
    with ProcessPoolExecutor(max_workers=workers) as pool:
        results = [r for chunk in pool.map(_run_chunk, chunks) for r in chunk]
    key = {(r.n_sats, r.n_baselines, r.sigma_mm, r.trial): r for r in results}
    return [key[(cfg.n_sats, cfg.n_baselines, cfg.sigma_mm, t)] for cfg, t, _ in jobs]


def _cell_report(cfg, records, methods, keep_records):
    summaries = {m: summarize(records, m) for m in methods}
    paired = [paired_test(records, "proposed", m) for m in methods if m != "proposed" and "proposed" in methods]
    return CellReport(cfg, summaries, paired, list(records) if keep_records else [])


def run_campaign(cfg: ScenarioConfig, methods=("proposed",), keep_records=False, workers=None) -> CellReport:
    """Monte Carlo run of one scenario cell."""
    return run_grid([cfg], methods, keep_records, workers).cells[0]


def run_grid(configs, methods=("proposed",), keep_records=False, workers=None, progress=None) -> CampaignReport:
    """Run several cells; per-trial failures count as unsuccessful trials."""
    methods = tuple(methods)
    for m in methods:
        if m not in METHODS:
            raise ValueError(f"unknown method {m!r}; choose from {METHODS}")
    workers = worker_count() if workers is None else workers
    cells = []
    for cfg in configs:
        jobs = [(cfg, t, methods) for t in range(cfg.trials)]
        records = _run_trials(jobs, workers)
        cells.append(_cell_report(cfg, records, methods, keep_records))
        if progress is not None:
            progress(cfg, cells[-1])
    return CampaignReport(cells)


def table_grid(sats=(4, 5, 6, 7, 8), sigmas_mm=(9.0, 7.0, 5.0, 3.0, 1.0), baselines=(1, 2, 3), **common):
    """Scenario cells of the success-rate table layout."""
    base = ScenarioConfig(**common)
    return [replace(base, n_sats=s, sigma_mm=float(sig), n_baselines=a)
            for a in baselines for s in sats for sig in sigmas_mm]


def attitude_error_deg(R_est, R_true):
    """Geodesic attitude error in degrees (direction angle for one baseline)."""
    return float(np.rad2deg(geodesic_angle(R_est, R_true)))
