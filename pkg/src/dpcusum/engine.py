"""DP-SUM-CUSUM detector state machine, the non-private baseline and test oracles.

One step of the private detector, for K streams:

    S[k] <- max(0, S[k] + score_k(x_k))        (score = LLR, clipped if truncated)
    U    <- S[0] + ... + S[K-1]
    Z    ~ Laplace(2 * delta_max / epsilon)    (fresh every step)
    alarm iff U + Z >= b + W                   (W drawn once at start)

The stopping time is inf{t >= 1: U_t + Z_t >= b + W}, so the detector keeps
running while U_t + Z_t < b + W and stops permanently at its first alarm.
Only the stopping time is meant to be released; the state object is internal.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numba
import numpy as np

from .errors import DetectorStateError, DimensionError, PreconditionError, SourceExhausted
from .model import global_sensitivity
from .noise import NoiseSpec, sample_laplace

DEFAULT_HORIZON = 10**6


@dataclass(frozen=True)
class DetectorConfig:
    models: tuple
    threshold: float
    noise: NoiseSpec
    horizon: int = DEFAULT_HORIZON
    epsilon: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "models", tuple(self.models))
        if not self.models:
            raise PreconditionError("a detector needs at least one stream")
        if not math.isfinite(self.threshold):
            raise PreconditionError(f"threshold must be finite, got {self.threshold}")
        if int(self.horizon) < 1:
            raise PreconditionError(f"horizon must be a positive integer, got {self.horizon}")
        object.__setattr__(self, "horizon", int(self.horizon))
        delta_max = global_sensitivity(self.models)
        if self.noise.live:
            if self.epsilon is None or not self.epsilon > 0:
                raise PreconditionError("live noise requires epsilon > 0")
            expected = 2.0 * delta_max / self.epsilon
            if not math.isclose(self.noise.scale, expected, rel_tol=1e-12):
                raise PreconditionError(
                    f"noise scale {self.noise.scale} inconsistent with 2*delta_max/epsilon = {expected}"
                )

    @classmethod
    def private(cls, models, epsilon, threshold, horizon=DEFAULT_HORIZON):
        noise = NoiseSpec.from_privacy(epsilon, global_sensitivity(models))
        return cls(tuple(models), float(threshold), noise, horizon, float(epsilon))

    @classmethod
    def nonprivate(cls, models, threshold, horizon=DEFAULT_HORIZON):
        return cls(tuple(models), float(threshold), NoiseSpec.zero(), horizon, None)

    @property
    def K(self):
        return len(self.models)

    @property
    def delta_max(self):
        return global_sensitivity(self.models)

    @property
    def private_mode(self):
        return self.noise.live

    def with_threshold(self, threshold):
        return replace(self, threshold=float(threshold))

    def to_dict(self):
        return {
            "K": self.K,
            "threshold": self.threshold,
            "epsilon": self.epsilon,
            "noise_mode": self.noise.mode.value,
            "noise_scale": self.noise.scale,
            "delta_max": self.delta_max,
            "horizon": self.horizon,
            "models": [m.to_dict() for m in self.models],
        }


@dataclass
class DetectorState:
    config: DetectorConfig
    S: np.ndarray
    W: float
    t: int = 0
    U: float = 0.0
    last_Z: float = 0.0
    stop_time: int | None = None

    @property
    def running(self):
        return self.stop_time is None

    @property
    def status(self):
        return "running" if self.running else f"alarmed({self.stop_time})"


@dataclass(frozen=True)
class StopOutcome:
    stop_time: int
    censored: bool
    final_U: float
    horizon: int = field(default=0)

    @property
    def alarm(self):
        return not self.censored


def init(config: DetectorConfig, rng) -> DetectorState:
    """Fresh detector state; the threshold noise W is drawn here and never again."""
    return DetectorState(config=config, S=np.zeros(config.K), W=sample_laplace(rng, config.noise))


def step(state: DetectorState, x, rng):
    """Advance one time step. Returns the stop time on alarm, ``None`` otherwise."""
    if not state.running:
        raise DetectorStateError(f"detector already alarmed at t={state.stop_time}")
    cfg = state.config
    if len(x) != cfg.K:
        raise DimensionError("<all>", cfg.K, len(x))
    state.t += 1
    S = state.S
    U = 0.0
    for k, model in enumerate(cfg.models):
        s = S[k] + model.score(x[k])
        s = s if s > 0.0 else 0.0
        S[k] = s
        U += s
    state.U = U
    z = sample_laplace(rng, cfg.noise)
    state.last_Z = z
    if U + z >= cfg.threshold + state.W:
        state.stop_time = state.t
        return state.t
    return None


def run(config: DetectorConfig, source, rng) -> StopOutcome:
    """Step through ``source`` (an iterable of K-observation rows) until alarm or horizon."""
    state = init(config, rng)
    rows = iter(source)
    for _ in range(config.horizon):
        try:
            x = next(rows)
        except StopIteration:
            raise SourceExhausted(
                f"source ended after {state.t} steps without alarm (horizon {config.horizon})"
            ) from None
        if step(state, x, rng) is not None:
            return StopOutcome(state.t, False, state.U, config.horizon)
    return StopOutcome(config.horizon, True, state.U, config.horizon)


class SumCusum:
    """Non-private SUM-CUSUM: alarm at the first t with sum_k S_t^k >= b."""

    def __init__(self, models, threshold):
        self.models = list(models)
        self.threshold = float(threshold)
        self.S = [0.0] * len(self.models)
        self.t = 0

    def update(self, x):
        self.t += 1
        for k, model in enumerate(self.models):
            self.S[k] = max(0.0, self.S[k] + model.score(x[k]))
        return sum(self.S) >= self.threshold

    def stop_time(self, source, horizon):
        """First alarm time on ``source``, or ``None`` if none within ``horizon`` steps."""
        for i, x in enumerate(source):
            if i >= horizon:
                break
            if self.update(x):
                return self.t
        return None


def cusum_bruteforce(llr_sequence):
    """S_t = max(0, max_j sum_{i=j..t} l_i) for every t, by enumerating all suffixes."""
    seq = [float(v) for v in llr_sequence]
    out = []
    for t in range(1, len(seq) + 1):
        best = 0.0
        for j in range(t):
            best = max(best, math.fsum(seq[j:t]))
        out.append(best)
    return out


# -- compiled kernels used by the Monte Carlo and audit paths --------------
# They perform exactly the same floating-point operations, in the same order,
# as ``step`` so fast and slow paths agree bit for bit.


@numba.njit(cache=True)
def scan_block(scores, z, S, thr):
    """Run the recursion over a block of steps; return the alarm row or -1.

    ``scores`` is (steps, K), ``z`` the per-step noise, ``S`` is updated in
    place and ``thr`` is b + W.
    """
    n, K = scores.shape
    for i in range(n):
        U = 0.0
        for k in range(K):
            s = S[k] + scores[i, k]
            if not s > 0.0:
                s = 0.0
            S[k] = s
            U += s
        if U + z[i] >= thr:
            return i
    return -1


@numba.njit(cache=True)
def scan_batch(scores, z, S, thr):
    """``scan_block`` for n trials at once: scores (n, steps, K), z (n, steps),
    S (n, K) updated in place, thr (n,). Returns each trial's alarm row or -1."""
    n, c, K = scores.shape
    hits = np.full(n, -1, dtype=np.int64)
    for j in range(n):
        for i in range(c):
            U = 0.0
            for k in range(K):
                s = S[j, k] + scores[j, i, k]
                if not s > 0.0:
                    s = 0.0
                S[j, k] = s
                U += s
            if U + z[j, i] >= thr[j]:
                hits[j] = i
                break
    return hits


@numba.njit(cache=True)
def cusum_paths(scores):
    """Per-stream CUSUM paths for a (T, K) matrix of increments, starting from zero."""
    n, K = scores.shape
    out = np.empty((n, K))
    S = np.zeros(K)
    for i in range(n):
        for k in range(K):
            s = S[k] + scores[i, k]
            if not s > 0.0:
                s = 0.0
            S[k] = s
            out[i, k] = s
    return out


def sum_paths(paths):
    """U_t for each row of a (T, K) path matrix, summed left to right like ``step``."""
    U = np.zeros(paths.shape[0])
    for k in range(paths.shape[1]):
        U = U + paths[:, k]
    return U
