"""Empirical checks of the privacy-relevant contracts.

``sensitivity_check`` certifies mechanically that changing one observation
moves the noiseless statistic U_t by at most delta_max at every t (and each
per-stream CUSUM by at most that stream's sensitivity). This bound is what
the privacy argument rests on.

``empirical_privacy_ratio`` is an advisory smoke test: for one fixed pair of
neighbouring tiny series it estimates P(T = n) under both by repeated noisy
runs and reports the largest |log ratio|. A small value does not certify
privacy; a value far above epsilon points to a bug such as mis-scaled noise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .data import MultiStreamSeries, generate
from .engine import DetectorConfig, cusum_paths, sum_paths
from .errors import DimensionError, PreconditionError
from .noise import laplace_from_uniform
from .scenario import ChangeScenario

GAP_TOL = 1e-9
EXTREME = 1e6
MIN_BIN_COUNT = 100
SLACK_SE = 3.0


@dataclass(frozen=True)
class NeighborEdit:
    """Replace the observation of stream ``k0`` at 0-based row ``t0`` by ``new_value``."""

    t0: int
    k0: int
    new_value: object


def make_neighbor(series: MultiStreamSeries, edit: NeighborEdit) -> MultiStreamSeries:
    if not 0 <= edit.t0 < series.T:
        raise PreconditionError(f"edit row {edit.t0} out of range [0, {series.T})")
    if not 0 <= edit.k0 < series.K:
        raise PreconditionError(f"edit stream {edit.k0} out of range [0, {series.K})")
    value = np.atleast_1d(np.asarray(edit.new_value, dtype=float))
    d = series.dims[edit.k0]
    if value.shape != (d,):
        raise DimensionError(series.ids[edit.k0], d, value.size)
    return series.replace_cell(edit.t0, edit.k0, value)


def score_matrix(models, series):
    """(T, K) matrix of per-step CUSUM increments."""
    return np.column_stack([m.score(series.stream(k)) for k, m in enumerate(models)])


def pair_gaps(models, series, neighbor):
    """Per-stream |S_t - S~_t| as a (T, K) array and |U_t - U~_t| as a (T,) array."""
    p = cusum_paths(np.ascontiguousarray(score_matrix(models, series)))
    q = cusum_paths(np.ascontiguousarray(score_matrix(models, neighbor)))
    return np.abs(p - q), np.abs(sum_paths(p) - sum_paths(q))


@dataclass(frozen=True)
class SensitivityReport:
    max_gap: float
    delta_max: float
    stream_max_gap: tuple
    stream_sensitivity: tuple
    n_pairs: int
    T: int

    @property
    def passed(self):
        return self.max_gap <= self.delta_max + GAP_TOL

    @property
    def streams_passed(self):
        return all(g <= d + GAP_TOL for g, d in zip(self.stream_max_gap, self.stream_sensitivity))

    def to_dict(self):
        return {
            "max_gap": self.max_gap,
            "delta_max": self.delta_max,
            "pass": self.passed,
            "stream_max_gap": list(self.stream_max_gap),
            "stream_sensitivity": list(self.stream_sensitivity),
            "streams_pass": self.streams_passed,
            "n_pairs": self.n_pairs,
            "T": self.T,
        }


def _random_edit_value(model, rng):
    """A fresh draw from either law, or an adversarial extreme (which saturates any clip)."""
    d = model.dim
    kind = int(rng.uniform() * 4)
    if kind == 0:
        x = model.pre.sample(rng.uniforms(d))
    elif kind == 1:
        x = model.post.sample(rng.uniforms(d))
    else:
        signs = np.where(rng.uniforms(d) < 0.5, -1.0, 1.0)
        x = signs * EXTREME
    return np.ravel(x)


def sensitivity_check(config: DetectorConfig, n_pairs, T, rng) -> SensitivityReport:
    """Largest statistic gap over random neighbouring pairs.

    Each pair draws a series of length T with a random change time and
    affected set, then edits one random cell with a pre/post draw or with
    +/-1e6 in every coordinate. Half of the pairs also put an extreme
    value in the base series at the edited cell.
    """
    models = config.models
    K = config.K
    T = int(T)
    if T < 1 or n_pairs < 1:
        raise PreconditionError("need T >= 1 and n_pairs >= 1")
    max_gap = 0.0
    stream_max = np.zeros(K)
    for _ in range(int(n_pairs)):
        tau = int(rng.uniform() * (T + 1))
        affected = [k for k in range(K) if rng.uniform() < 0.5] or [int(rng.uniform() * K)]
        scenario = ChangeScenario(tau, frozenset(affected))
        series = generate(scenario, T, rng, models)
        t0 = int(rng.uniform() * T)
        k0 = int(rng.uniform() * K)
        if rng.uniform() < 0.5:
            series = make_neighbor(series, NeighborEdit(t0, k0, _random_edit_value(models[k0], rng)))
        neighbor = make_neighbor(series, NeighborEdit(t0, k0, _random_edit_value(models[k0], rng)))
        per_stream, total = pair_gaps(models, series, neighbor)
        max_gap = max(max_gap, float(total.max()))
        stream_max = np.maximum(stream_max, per_stream.max(axis=0))
    return SensitivityReport(
        max_gap=max_gap,
        delta_max=config.delta_max,
        stream_max_gap=tuple(float(g) for g in stream_max),
        stream_sensitivity=tuple(float(m.sensitivity) for m in models),
        n_pairs=int(n_pairs),
        T=T,
    )


@dataclass(frozen=True)
class RatioReport:
    epsilon: float
    status: str  # "pass", "violation" or "inconclusive"
    max_abs_log_ratio: float | None
    rows: tuple
    n_runs: int
    noise_scale: float
    advisory: bool = True

    def to_dict(self):
        return {
            "epsilon": self.epsilon,
            "status": self.status,
            "max_abs_log_ratio": self.max_abs_log_ratio,
            "rows": list(self.rows),
            "n_runs": self.n_runs,
            "noise_scale": self.noise_scale,
            "advisory": self.advisory,
        }


def _stop_counts(U, thr, scale, n_runs, rng):
    """Histogram of stop times 1..T plus a final 'no stop by T' bin."""
    T = len(U)
    u = rng.uniforms(n_runs * (T + 1)).reshape(n_runs, T + 1)
    lap = laplace_from_uniform(u, scale)
    W, Z = lap[:, 0], lap[:, 1:]
    hit = U[None, :] + Z >= thr + W[:, None]
    first = np.where(hit.any(axis=1), hit.argmax(axis=1), T)
    return np.bincount(first, minlength=T + 1)


def empirical_privacy_ratio(config: DetectorConfig, series, edit: NeighborEdit, n_runs, rng, noise_scale=None):
    """Estimate max_n |log P(T=n | X) / P(T=n | X~)| for one neighbouring pair.

    Only bins where both counts reach 100 are compared; a bin is flagged
    when its |log ratio| exceeds epsilon by more than 3 delta-method
    standard errors. ``noise_scale`` overrides the configured scale (used to
    check that the audit catches mis-scaled noise).
    """
    if config.K > 2 or series.T > 5:
        raise PreconditionError(f"ratio audit is for tiny problems (K <= 2, T <= 5), got K={config.K}, T={series.T}")
    if n_runs < 100_000:
        raise PreconditionError(f"ratio audit needs n_runs >= 1e5, got {n_runs}")
    eps = config.epsilon
    if not config.noise.live:
        return RatioReport(eps, "inconclusive", None, (), int(n_runs), 0.0)
    scale = config.noise.scale if noise_scale is None else float(noise_scale)
    neighbor = make_neighbor(series, edit)
    U = sum_paths(cusum_paths(np.ascontiguousarray(score_matrix(config.models, series))))
    V = sum_paths(cusum_paths(np.ascontiguousarray(score_matrix(config.models, neighbor))))
    cx = _stop_counts(U, config.threshold, scale, int(n_runs), rng)
    cy = _stop_counts(V, config.threshold, scale, int(n_runs), rng)
    rows = []
    worst = None
    violated = False
    for n, (a, b) in enumerate(zip(cx, cy), start=1):
        label = n if n <= series.T else f">{series.T}"
        row = {"n": label, "count_x": int(a), "count_neighbor": int(b)}
        if a >= MIN_BIN_COUNT and b >= MIN_BIN_COUNT:
            p, q = a / n_runs, b / n_runs
            lr = math.log(p / q)
            se = math.sqrt((1 - p) / (n_runs * p) + (1 - q) / (n_runs * q))
            row.update(log_ratio=lr, slack=SLACK_SE * se)
            worst = abs(lr) if worst is None else max(worst, abs(lr))
            if abs(lr) > eps + SLACK_SE * se:
                violated = True
                row["flag"] = True
        rows.append(row)
    if worst is None:
        status = "inconclusive"
    else:
        status = "violation" if violated else "pass"
    return RatioReport(eps, status, worst, tuple(rows), int(n_runs), scale)
