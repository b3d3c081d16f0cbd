"""Closed-form guarantees for DP-SUM-CUSUM.

* ``h``: exponent of the ARL growth in the threshold, min(eps / (2 delta_max), 1).
* ``arl_lower_bound``: E_inf[T(b)] >= (1/16) exp(h b - (K+1)) ((K+1)/(b+K+1))^(K+1), b > K+1.
* ``wadd_upper_leading``: b / I_tot + 4 delta_max sqrt(b) / (eps I_tot^(3/2)).
  The additive constant of the delay bound depends on (eps, delta_max, I_tot)
  only and is not reconstructed; callers get the two b-dependent terms.
* ``asymptotic_threshold``: log(gamma) / h, the first-order threshold for a
  target ARL gamma.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .errors import PreconditionError


@dataclass(frozen=True)
class PrivacyParams:
    epsilon: float
    delta_max: float

    def __post_init__(self):
        for name in ("epsilon", "delta_max"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0):
                raise PreconditionError(f"{name} must be positive and finite, got {v}")


def h(p: PrivacyParams) -> float:
    return min(p.epsilon / (2.0 * p.delta_max), 1.0)


def log_arl_lower_bound(b, K, p):
    if K < 1:
        raise PreconditionError(f"K must be >= 1, got {K}")
    if not b > K + 1:
        raise PreconditionError(f"ARL bound requires b > K + 1 = {K + 1}, got b = {b}")
    k1 = K + 1
    return -math.log(16.0) + h(p) * b - k1 + k1 * (math.log(k1) - math.log(b + k1))


def arl_lower_bound(b: float, K: int, p: PrivacyParams) -> float:
    """Lower bound on the ARL, computed in log space (overflows to inf only past ~1e308)."""
    log_val = log_arl_lower_bound(b, K, p)
    return math.exp(log_val) if log_val < 709.0 else math.inf


def wadd_upper_leading(b: float, I_tot: float, p: PrivacyParams) -> float:
    """Leading terms of the worst-case delay bound; the additive constant C is omitted."""
    if not b > 0:
        raise PreconditionError(f"b must be > 0, got {b}")
    if not (I_tot > 0 and math.isfinite(I_tot)):
        raise PreconditionError(f"total information number must be > 0, got {I_tot}")
    return b / I_tot + 4.0 * p.delta_max / (p.epsilon * I_tot**1.5) * math.sqrt(b)


def asymptotic_threshold(gamma: float, p: PrivacyParams | None) -> float:
    """log(gamma) / h; ``p=None`` means no privacy noise (h = 1)."""
    if not gamma > 1:
        raise PreconditionError(f"target ARL gamma must be > 1, got {gamma}")
    rate = 1.0 if p is None else h(p)
    return math.log(gamma) / rate


def bounds_record(K, epsilon, delta_max, threshold, I_tot, gamma):
    p = PrivacyParams(epsilon, delta_max)
    return {
        "h": h(p),
        "arl_lower_bound": arl_lower_bound(threshold, K, p),
        "wadd_upper_leading": wadd_upper_leading(threshold, I_tot, p),
        "wadd_note": "leading terms, constant omitted",
        "asymptotic_threshold": asymptotic_threshold(gamma, p),
    }
