"""Ground-truth change scenarios and the shared observation sampler.

Randomness layout (shared by data generation and the Monte Carlo runner):
each time step consumes exactly ``sum_k dim_k`` open-interval uniforms from
the data stream, stream 0's coordinates first. An observation is the
inverse-CDF transform of its uniforms under whichever law is active, so a
trial is reproducible from its seed however it is chunked.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import PreconditionError

NO_CHANGE = math.inf


@dataclass(frozen=True)
class ChangeScenario:
    """Change at ``tau`` (``math.inf`` = never) in the 0-based streams ``affected``.

    Stream k draws from its post-change law at times t > tau iff k is affected.
    """

    tau: float = NO_CHANGE
    affected: frozenset = frozenset()
    models: tuple | None = None

    def __post_init__(self):
        object.__setattr__(self, "affected", frozenset(int(k) for k in self.affected))
        tau = self.tau
        if not (tau == NO_CHANGE or (float(tau).is_integer() and tau >= 0)):
            raise PreconditionError(f"tau must be a nonnegative integer or inf, got {tau}")
        if tau != NO_CHANGE:
            object.__setattr__(self, "tau", int(tau))
            if not self.affected:
                raise PreconditionError("a change scenario needs at least one affected stream")
        if any(k < 0 for k in self.affected):
            raise PreconditionError("stream indices are 0-based and nonnegative")
        if self.models is not None:
            object.__setattr__(self, "models", tuple(self.models))
            self.check(len(self.models))

    @classmethod
    def no_change(cls, models=None):
        return cls(NO_CHANGE, frozenset(), models)

    @classmethod
    def immediate(cls, affected, models=None):
        return cls(0, frozenset(affected), models)

    @property
    def m(self):
        return len(self.affected)

    def check(self, K):
        bad = sorted(k for k in self.affected if k >= K)
        if bad:
            raise PreconditionError(f"affected streams {bad} out of range for K={K}")

    def total_info(self, models=None):
        """Sum of post-change drifts of the affected streams' CUSUM increments."""
        models = models if models is not None else self.models
        return math.fsum(models[k].drift_info for k in sorted(self.affected))

    def to_dict(self):
        return {
            "tau": None if self.tau == NO_CHANGE else self.tau,
            "affected": sorted(self.affected),
        }


def draw_dim(models):
    return sum(m.dim for m in models)


def sample_block(models, scenario, u, t0):
    """Observations for times t0+1 .. t0+c from a (c, sum dims) block of uniforms.

    Returns a list with one array per stream: shape (c,) for scalar streams,
    (c, d) for vector streams.
    """
    c = u.shape[0]
    out = []
    off = 0
    tau = scenario.tau
    for k, model in enumerate(models):
        d = model.dim
        cols = u[:, off:off + d]
        off += d
        if k not in scenario.affected or tau == NO_CHANGE or t0 + c <= tau:
            out.append(model.pre.sample(cols))
        elif t0 >= tau:
            out.append(model.post.sample(cols))
        else:
            n_pre = tau - t0
            pre = model.pre.sample(cols[:n_pre])
            post = model.post.sample(cols[n_pre:])
            out.append(np.concatenate([pre, post], axis=0))
    return out


def score_block(models, scenario, u, t0):
    """(c, K) matrix of CUSUM increments for a (c, sum dims) block of uniforms.

    A stacked (n, c, sum dims) block (n trials at the same time t0) gives an
    (n, c, K) result with exactly the per-trial values.
    """
    if u.ndim == 3:
        n, c, dim = u.shape
        tau = scenario.tau
        if tau == NO_CHANGE or t0 >= tau or t0 + c <= tau:
            return score_block(models, scenario, u.reshape(n * c, dim), t0).reshape(n, c, len(models))
        return np.stack([score_block(models, scenario, ui, t0) for ui in u])
    obs = sample_block(models, scenario, u, t0)
    scores = np.empty((u.shape[0], len(models)))
    for k, (model, x) in enumerate(zip(models, obs)):
        scores[:, k] = model.score(x)
    return scores
