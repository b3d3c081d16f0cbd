"""Monte Carlo estimation of run lengths, delay curves and threshold calibration.

Every trial owns two random streams derived from ``(master_seed, trial_index,
role)``: ``"<lane>:data"`` for observations and ``"<lane>:noise"`` for the
threshold noise W followed by the per-step noise Z_1, Z_2, ... . ARL trials
use lane ``"arl"``, delay trials lane ``"delay"``, so the two estimates at a
threshold are independent. The same lanes are reused for every threshold
(common random numbers), which makes estimated ARL curves monotone in b
trial by trial.

Trials are simulated in resumable batches, advanced to a doubling sequence of
checkpoints. Between checkpoints the runner can stop early once the 99% lower
confidence limit of mean(min(T, t)) clears a target: since
E[min(T, t)] <= E[T], that certifies E[T] exceeds the target without running
every trial to the horizon. Results are reduced in trial-index order, so
reports do not depend on how trials are split over workers.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field

import numpy as np
from joblib import Parallel, delayed

from .bounds import PrivacyParams, asymptotic_threshold
from .engine import DetectorConfig, scan_batch
from .errors import ConvergenceError, PreconditionError
from .noise import RngHandle
from .scenario import NO_CHANGE, ChangeScenario, draw_dim, score_block

__all__ = [
    "ChangeScenario",
    "TrialPlan",
    "EstimateReport",
    "CurvePoint",
    "Calibration",
    "estimate_arl",
    "estimate_delay",
    "certify_arl_bound",
    "sweep_curve",
    "delay_at_arl",
    "calibrate_threshold",
    "geometric_grid",
    "write_curve_csv",
    "CSV_COLUMNS",
]

Z99 = 2.3263478740408408  # one-sided 99% normal quantile
FIRST_CHECKPOINT = 256
MIN_CHUNK = 64
MAX_CHUNK = 16384
# uniforms held at once when advancing a slice of trials together
BLOCK_ELEMENTS = 1 << 20
CSV_COLUMNS = ("b", "arl_mean", "arl_stderr", "delay_mean", "delay_stderr", "arl_censored_frac")


def default_jobs():
    return os.cpu_count() or 1


@dataclass(frozen=True)
class TrialPlan:
    n_trials: int
    horizon: int
    master_seed: int

    def __post_init__(self):
        if int(self.n_trials) < 1:
            raise PreconditionError(f"n_trials must be >= 1, got {self.n_trials}")
        if int(self.horizon) < 1:
            raise PreconditionError(f"horizon must be >= 1, got {self.horizon}")
        object.__setattr__(self, "n_trials", int(self.n_trials))
        object.__setattr__(self, "horizon", int(self.horizon))
        object.__setattr__(self, "master_seed", int(self.master_seed))

    def to_dict(self):
        return {"n_trials": self.n_trials, "horizon": self.horizon, "master_seed": self.master_seed}


@dataclass(frozen=True)
class EstimateReport:
    """Sample mean of min(T, reached) over trials.

    ``status`` is ``"ok"`` (simulated to the horizon), ``"capped"`` (stopped
    early once the target was certified; ``mean`` is then a lower bound on
    E[T]) or ``"skipped"`` (not simulated; ``mean`` is a lower bound carried
    over from a smaller threshold).
    """

    mean: float
    stderr: float
    censored_fraction: float
    n_trials: int
    horizon: int
    reached: int
    lane: str
    status: str = "ok"
    config: dict = field(default_factory=dict)

    @property
    def lcl99(self):
        return self.mean - Z99 * self.stderr

    @property
    def valid(self):
        return self.status == "ok" and self.censored_fraction < 0.01

    @property
    def lower_bound_only(self):
        return self.status != "ok"

    def to_dict(self):
        return {
            "mean": self.mean,
            "stderr": self.stderr,
            "lcl99": self.lcl99,
            "censored_fraction": self.censored_fraction,
            "n_trials": self.n_trials,
            "horizon": self.horizon,
            "reached": self.reached,
            "lane": self.lane,
            "status": self.status,
            "valid": self.valid,
            "config": self.config,
        }

    @classmethod
    def from_dict(cls, d):
        keys = ("mean", "stderr", "censored_fraction", "n_trials", "horizon", "reached", "lane", "status", "config")
        return cls(**{k: d[k] for k in keys if k in d})


@dataclass(frozen=True)
class CurvePoint:
    threshold: float
    arl: EstimateReport
    delay: EstimateReport

    def to_dict(self):
        return {"b": self.threshold, "arl": self.arl.to_dict(), "delay": self.delay.to_dict()}

    @classmethod
    def from_dict(cls, d):
        return cls(float(d["b"]), EstimateReport.from_dict(d["arl"]), EstimateReport.from_dict(d["delay"]))

    def csv_row(self):
        return (
            self.threshold,
            self.arl.mean,
            self.arl.stderr,
            self.delay.mean,
            self.delay.stderr,
            self.arl.censored_fraction,
        )


def _config_echo(config: DetectorConfig, master_seed):
    return {
        "threshold": config.threshold,
        "epsilon": config.epsilon,
        "noise_mode": config.noise.mode.value,
        "noise_scale": config.noise.scale,
        "K": config.K,
        "master_seed": master_seed,
    }


class _TrialBatch:
    """A contiguous block of trials that can be advanced and resumed."""

    def __init__(self, config, scenario, master_seed, trial_ids, lane):
        self.config = config
        self.scenario = scenario
        self.lane = lane
        self.ids = np.asarray(trial_ids, dtype=np.int64)
        n = len(self.ids)
        self.data = [RngHandle(master_seed, i, f"{lane}:data") for i in self.ids]
        self.noise = [RngHandle(master_seed, i, f"{lane}:noise") for i in self.ids]
        self.dim = draw_dim(config.models)
        self.S = np.zeros((n, config.K))
        self.t = np.zeros(n, dtype=np.int64)
        self.alarmed = np.zeros(n, dtype=bool)
        spec = config.noise
        # W comes first on each noise stream, exactly as in engine.init
        if spec.live:
            self.W = np.array([r.laplace(1, spec.scale)[0] for r in self.noise])
        else:
            self.W = np.zeros(n)
        self.thr = config.threshold + self.W

    def advance(self, until):
        spec = self.config.noise
        while True:
            active = np.flatnonzero(~self.alarmed & (self.t < until))
            if active.size == 0:
                break
            # trials still running share one clock; group defensively anyway
            t = int(self.t[active].min())
            active = active[self.t[active] == t]
            c = min(max(MIN_CHUNK, t), MAX_CHUNK, until - t)
            per_slice = max(1, BLOCK_ELEMENTS // (c * self.dim))
            for lo in range(0, active.size, per_slice):
                idx = active[lo:lo + per_slice]
                u = np.stack([self.data[i].uniforms(c * self.dim) for i in idx]).reshape(len(idx), c, self.dim)
                scores = score_block(self.config.models, self.scenario, u, t)
                if spec.live:
                    z = np.stack([self.noise[i].laplace(c, spec.scale) for i in idx])
                else:
                    z = np.zeros((len(idx), c))
                S = self.S[idx]
                hits = scan_batch(scores, z, S, self.thr[idx])
                self.S[idx] = S
                done = hits >= 0
                self.alarmed[idx[done]] = True
                self.t[idx] = np.where(done, t + hits + 1, t + c)
        return self


def _advance(batch, until):
    return batch.advance(until)


def _simulate(config, scenario, plan, lane, jobs=1, target=None):
    """Run all trials; returns (times, alarmed, reached, capped)."""
    scenario.check(config.K)
    n = plan.n_trials
    jobs = max(1, min(int(jobs or 1), n))
    shards = [s for s in np.array_split(np.arange(n), jobs) if len(s)]
    batches = [_TrialBatch(config, scenario, plan.master_seed, s, lane) for s in shards]
    H = plan.horizon
    until = H if target is None else min(FIRST_CHECKPOINT, H)

    def run_to(par, until):
        if par is None:
            return [b.advance(until) for b in batches]
        return par(delayed(_advance)(b, until) for b in batches)

    par_ctx = Parallel(n_jobs=jobs) if jobs > 1 else None
    try:
        if par_ctx is not None:
            par_ctx.__enter__()
        while True:
            batches = run_to(par_ctx, until)
            times = np.concatenate([b.t for b in batches])
            alarmed = np.concatenate([b.alarmed for b in batches])
            if until >= H or alarmed.all():
                return times, alarmed, until, False
            if target is not None:
                mean, se = _mean_se(times)
                if mean - Z99 * se >= target:
                    return times, alarmed, until, True
            until = min(2 * until, H)
    finally:
        if par_ctx is not None:
            par_ctx.__exit__(None, None, None)


def _mean_se(times):
    vals = times.astype(np.float64)
    mean = float(np.mean(vals))
    se = float(np.std(vals, ddof=1) / math.sqrt(len(vals))) if len(vals) > 1 else 0.0
    return mean, se


def _report(config, plan, lane, times, alarmed, reached, capped):
    mean, se = _mean_se(times)
    return EstimateReport(
        mean=mean,
        stderr=se,
        censored_fraction=float(np.mean(~alarmed)),
        n_trials=plan.n_trials,
        horizon=plan.horizon,
        reached=int(reached),
        lane=lane,
        status="capped" if capped else "ok",
        config=_config_echo(config, plan.master_seed),
    )


def estimate_arl(config: DetectorConfig, plan: TrialPlan, jobs=1, cap=None) -> EstimateReport:
    """ARL under no change; censored trials count as the horizon.

    With ``cap`` set, simulation stops as soon as the 99% lower confidence
    limit of the running mean exceeds ``cap`` (status ``"capped"``).
    """
    scenario = ChangeScenario.no_change()
    res = _simulate(config, scenario, plan, "arl", jobs, target=cap)
    return _report(config, plan, "arl", *res)


def estimate_delay(config: DetectorConfig, plan: TrialPlan, scenario: ChangeScenario, jobs=1) -> EstimateReport:
    """Mean stop time with the change in effect from t = 1."""
    if scenario.tau == NO_CHANGE or scenario.tau != 0:
        raise PreconditionError(
            f"unsupported scenario: delay is estimated for an immediate change (tau = 0), got tau = {scenario.tau}"
        )
    res = _simulate(config, scenario, plan, "delay", jobs)
    return _report(config, plan, "delay", *res)


def certify_arl_bound(config: DetectorConfig, plan: TrialPlan, bound: float, jobs=1):
    """Check that the 99% lower confidence limit of the ARL is at least ``bound``.

    Trials are streamed to doubling checkpoints and stop once the limit of
    mean(min(T, t)) clears the bound; if the horizon is reached first the
    verdict rests on the full estimate.
    """
    rep = estimate_arl(config, plan, jobs, cap=bound)
    return {"bound": bound, "lcl99": rep.lcl99, "pass": rep.lcl99 >= bound, "report": rep.to_dict()}


def geometric_grid(b_min, b_max, steps):
    if steps < 1:
        raise PreconditionError("threshold grid needs at least one point")
    if steps == 1:
        return [float(b_min)]
    if not 0 < b_min < b_max:
        raise PreconditionError(f"need 0 < b_min < b_max, got {b_min}, {b_max}")
    return [float(v) for v in np.geomspace(b_min, b_max, steps)]


def sweep_curve(config, thresholds, plan, scenario, jobs=1, arl_cap=None, arl_stop=None):
    """ARL and delay at each threshold, sorted by b.

    ``arl_cap`` is forwarded to ``estimate_arl`` as an early-exit target.
    Once a point's ARL estimate exceeds ``arl_stop``, larger thresholds are
    not simulated for ARL: with common random numbers T is nondecreasing in
    b on every trial, so the last estimate is reported as their lower bound.
    """
    bs = [float(b) for b in thresholds]
    if not bs:
        raise PreconditionError("threshold list is empty")
    if any(b1 <= b0 for b0, b1 in zip(bs, bs[1:])):
        raise PreconditionError("thresholds must be strictly increasing")
    points = []
    carry = None
    for b in bs:
        cfg = config.with_threshold(b)
        if carry is None:
            arl = estimate_arl(cfg, plan, jobs, cap=arl_cap)
            if arl_stop is not None and arl.mean > arl_stop:
                carry = arl
        else:
            arl = EstimateReport(
                mean=carry.mean,
                stderr=carry.stderr,
                censored_fraction=carry.censored_fraction,
                n_trials=carry.n_trials,
                horizon=carry.horizon,
                reached=carry.reached,
                lane="arl",
                status="skipped",
                config=_config_echo(cfg, plan.master_seed),
            )
        delay = estimate_delay(cfg, plan, scenario, jobs)
        points.append(CurvePoint(b, arl, delay))
    return points


def delay_at_arl(points, level, upper_ok=False):
    """Delay at ARL ``level`` by linear interpolation in log ARL between neighbours.

    Returns ``(delay, stderr, exact)`` or ``None`` when ``level`` is not
    bracketed. The standard error combines both endpoints' delay errors and,
    by the delta method, their ARL errors, which shift where the level is
    crossed (endpoints treated as independent). With ``upper_ok``, a capped point (whose ARL is
    only a lower bound) may serve as the upper endpoint: the curve is
    increasing, so interpolating towards an underestimated ARL overstates
    the delay and the result (``exact=False``) is an upper bound.
    """
    for p0, p1 in zip(points, points[1:]):
        if p0.arl.lower_bound_only:
            break
        a0, a1 = p0.arl.mean, p1.arl.mean
        if p1.arl.lower_bound_only and not upper_ok:
            break
        if a0 <= level <= a1 and a1 > a0:
            w = (math.log(level) - math.log(a0)) / (math.log(a1) - math.log(a0))
            d = (1 - w) * p0.delay.mean + w * p1.delay.mean
            span = math.log(a1) - math.log(a0)
            slope = (p1.delay.mean - p0.delay.mean) / span
            # d(delay)/d(log a0) = -slope (1 - w), d(delay)/d(log a1) = -slope w
            se = math.sqrt(
                ((1 - w) * p0.delay.stderr) ** 2
                + (w * p1.delay.stderr) ** 2
                + (slope * (1 - w) * p0.arl.stderr / a0) ** 2
                + (slope * w * p1.arl.stderr / a1) ** 2
            )
            return d, se, not p1.arl.lower_bound_only
    return None


@dataclass(frozen=True)
class Calibration:
    threshold: float
    report: EstimateReport
    converged: bool
    probes: tuple

    def to_dict(self):
        return {
            "threshold": self.threshold,
            "arl": self.report.to_dict(),
            "converged": self.converged,
            "probes": [{"b": b, "arl_mean": m, "status": s} for b, m, s in self.probes],
        }


def calibrate_threshold(config, gamma, plan, jobs=1, rel_tol=0.1, max_probes=20, max_expansions=8):
    """Stochastic bisection for the threshold whose estimated ARL is ``gamma``.

    The bracket starts at [0.25, 4] times the asymptotic threshold and is
    widened if needed. Every probe reuses the same seeds, so estimated ARL is
    monotone in b and bisection is well defined. Probes stop early once the
    ARL is certified above 2 * gamma.
    """
    if not gamma > 1:
        raise PreconditionError(f"target ARL must be > 1, got {gamma}")
    p = PrivacyParams(config.epsilon, config.delta_max) if config.noise.live else None
    b0 = asymptotic_threshold(gamma, p)
    probes = []

    def probe(b):
        rep = estimate_arl(config.with_threshold(b), plan, jobs, cap=2.0 * gamma)
        probes.append((b, rep.mean, rep.status))
        return rep

    def close(rep):
        return rep.status == "ok" and abs(rep.mean - gamma) <= rel_tol * gamma

    def done(b, rep, ok):
        return Calibration(b, rep, ok, tuple(probes))

    lo, hi = 0.25 * b0, 4.0 * b0
    r_lo = probe(lo)
    if close(r_lo):
        return done(lo, r_lo, True)
    for _ in range(max_expansions):
        if r_lo.mean < gamma:
            break
        lo = lo / 4.0 if lo > 1.0 else lo - 4.0 * max(b0, 1.0)
        r_lo = probe(lo)
        if close(r_lo):
            return done(lo, r_lo, True)
    r_hi = probe(hi)
    if close(r_hi):
        return done(hi, r_hi, True)
    for _ in range(max_expansions):
        if r_hi.mean > gamma:
            break
        lo, r_lo = hi, r_hi
        hi *= 2.0
        r_hi = probe(hi)
        if close(r_hi):
            return done(hi, r_hi, True)
    if not (r_lo.mean < gamma < r_hi.mean):
        raise ConvergenceError(
            f"could not bracket ARL {gamma}: probes (b, ARL, status) = {probes}"
        )
    b, rep = hi, r_hi
    while len(probes) < max_probes:
        b = 0.5 * (lo + hi)
        rep = probe(b)
        if close(rep):
            return done(b, rep, True)
        if rep.mean < gamma:
            lo = b
        else:
            hi = b
    return done(b, rep, False)


def write_curve_csv(points, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for p in points:
            w.writerow([repr(float(v)) for v in p.csv_row()])
