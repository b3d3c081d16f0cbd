"""Seed-derivable randomness for the detector and the Monte Carlo harness.

Every random stream is a numpy ``Philox`` (counter-based) generator keyed by
hashing the triple ``(master_seed, trial_index, role)`` through
``SeedSequence``. The same triple gives the same stream on any platform and
regardless of how trials are distributed over workers.

Uniforms are produced from raw 64-bit outputs on the open interval (0, 1),
so the Laplace inverse CDF never sees ``log(0)``. Real-valued Laplace
sampling has known floating-point side channels; they are not mitigated
here.
"""

from __future__ import annotations

import enum
import math
import zlib
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtri

from .errors import PreconditionError

_MASK64 = (1 << 64) - 1
_TWO_M52 = 2.0 ** -52


class NoiseMode(enum.Enum):
    LIVE = "live"
    ZERO = "zero"


@dataclass(frozen=True)
class NoiseSpec:
    """Laplace noise law shared by the per-step noise and the threshold noise."""

    scale: float
    mode: NoiseMode = NoiseMode.LIVE

    def __post_init__(self):
        if self.mode is NoiseMode.ZERO:
            if self.scale != 0.0:
                raise PreconditionError("zero-mode noise must have scale 0")
        elif not (math.isfinite(self.scale) and self.scale > 0.0):
            raise PreconditionError(f"live noise needs a finite positive scale, got {self.scale}")

    @classmethod
    def from_privacy(cls, epsilon, delta_max):
        if not (epsilon > 0 and math.isfinite(epsilon)):
            raise PreconditionError(f"epsilon must be positive and finite, got {epsilon}")
        if not (delta_max > 0 and math.isfinite(delta_max)):
            raise PreconditionError(f"global sensitivity must be positive and finite, got {delta_max}")
        return cls(2.0 * delta_max / epsilon, NoiseMode.LIVE)

    @classmethod
    def zero(cls):
        return cls(0.0, NoiseMode.ZERO)

    @property
    def live(self):
        return self.mode is NoiseMode.LIVE


def role_code(role):
    return zlib.crc32(str(role).encode("utf-8"))


class RngHandle:
    """Single-owner random stream derived from ``(master_seed, trial_index, role)``."""

    def __init__(self, master_seed, trial_index=0, role="default"):
        self.master_seed = int(master_seed)
        self.trial_index = int(trial_index)
        self.role = str(role)
        seq = np.random.SeedSequence(
            [self.master_seed & _MASK64, self.trial_index & _MASK64, role_code(role)]
        )
        self._bitgen = np.random.Philox(seq)

    def __repr__(self):
        return f"RngHandle(master_seed={self.master_seed}, trial_index={self.trial_index}, role={self.role!r})"

    def uniforms(self, n):
        """``n`` uniforms on the open interval (0, 1): (k + 1/2) / 2**52 for 52 random bits k."""
        raw = self._bitgen.random_raw(n)
        return ((raw >> np.uint64(12)).astype(np.float64) + 0.5) * _TWO_M52

    def uniform(self):
        return float(self.uniforms(1)[0])

    def laplace(self, n, scale):
        return laplace_from_uniform(self.uniforms(n), scale)

    def normals(self, n):
        return ndtri(self.uniforms(n))

    # pickling keeps the generator position, so batches can move between processes
    def __getstate__(self):
        return {
            "master_seed": self.master_seed,
            "trial_index": self.trial_index,
            "role": self.role,
            "state": self._bitgen.state,
        }

    def __setstate__(self, st):
        self.__init__(st["master_seed"], st["trial_index"], st["role"])
        self._bitgen.state = st["state"]


def derive_trial_rng(master_seed, trial_index, role):
    return RngHandle(master_seed, trial_index, role)


def laplace_from_uniform(u, scale):
    """Inverse CDF of Laplace(0, scale): -scale * sign(u - 1/2) * ln(1 - 2|u - 1/2|).

    ``1 - 2|u - 1/2|`` is evaluated as ``2 * min(u, 1 - u)``, which is the same
    number without cancellation for u near 0.
    """
    u = np.asarray(u, dtype=float)
    out = -scale * np.sign(u - 0.5) * np.log(2.0 * np.minimum(u, 1.0 - u))
    return float(out) if out.ndim == 0 else out


def sample_laplace(rng: RngHandle, spec: NoiseSpec) -> float:
    """One draw from the noise law; zero mode returns 0 without consuming randomness."""
    if not spec.live:
        return 0.0
    return laplace_from_uniform(rng.uniform(), spec.scale)
