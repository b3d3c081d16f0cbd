"""Adaptive Simpson integration, vectorized level by level.

All unconverged subintervals at one refinement depth are evaluated in a
single call of the integrand, so ``f`` must accept and return numpy arrays.
"""

import math

import numpy as np

from .errors import QuadratureError

MAX_INTERVALS = 4_000_000


def adaptive_simpson(f, a, b, tol=1e-8, max_depth=40, breakpoints=(), panels=1):
    """Integrate ``f`` over ``[a, b]`` to absolute tolerance ``tol``.

    ``breakpoints`` inside ``(a, b)`` become panel edges (use them for kinks
    of the integrand); each resulting piece is further split into ``panels``
    equal panels before refinement starts. The tolerance is distributed in
    proportion to interval width.
    """
    if not b > a:
        if a == b:
            return 0.0
        return -adaptive_simpson(f, b, a, tol, max_depth, breakpoints, panels)
    inner = sorted({float(p) for p in breakpoints if a < p < b})
    edges = np.array([a, *inner, b], dtype=float)
    if panels > 1:
        pieces = [np.linspace(lo, hi, panels + 1)[:-1] for lo, hi in zip(edges[:-1], edges[1:])]
        edges = np.append(np.concatenate(pieces), b)
    lo, hi = edges[:-1], edges[1:]
    mid = 0.5 * (lo + hi)
    vals = np.asarray(f(np.concatenate([lo, mid, hi])), dtype=float)
    n = lo.size
    flo, fmid, fhi = vals[:n], vals[n:2 * n], vals[2 * n:]
    whole = (hi - lo) / 6.0 * (flo + 4.0 * fmid + fhi)
    tols = tol * (hi - lo) / (b - a)

    parts = []
    err = 0.0
    for _depth in range(max_depth + 1):
        lm = 0.5 * (lo + mid)
        rm = 0.5 * (mid + hi)
        vals = np.asarray(f(np.concatenate([lm, rm])), dtype=float)
        n = lo.size
        flm, frm = vals[:n], vals[n:]
        left = (mid - lo) / 6.0 * (flo + 4.0 * flm + fmid)
        right = (hi - mid) / 6.0 * (fmid + 4.0 * frm + fhi)
        delta = left + right - whole
        if not np.all(np.isfinite(delta)):
            raise QuadratureError("integrand produced non-finite values")
        done = np.abs(delta) <= 15.0 * tols
        parts.append(left[done] + right[done] + delta[done] / 15.0)
        err += float(np.sum(np.abs(delta[done]))) / 15.0
        keep = ~done
        if not keep.any():
            return math.fsum(np.concatenate(parts))
        if 2 * int(keep.sum()) > MAX_INTERVALS:
            break
        # children: [lo, mid] and [mid, hi] of every unconverged interval
        lo, mid, hi = (
            np.concatenate([lo[keep], mid[keep]]),
            np.concatenate([lm[keep], rm[keep]]),
            np.concatenate([mid[keep], hi[keep]]),
        )
        flo, fmid, fhi = (
            np.concatenate([flo[keep], fmid[keep]]),
            np.concatenate([flm[keep], frm[keep]]),
            np.concatenate([fmid[keep], fhi[keep]]),
        )
        whole = np.concatenate([left[keep], right[keep]])
        tols = np.concatenate([tols[keep], tols[keep]]) / 2.0
    achieved = err + float(np.sum(np.abs(delta[keep]))) / 15.0
    raise QuadratureError(
        f"adaptive Simpson did not reach tolerance {tol:g} within depth {max_depth}",
        achieved=achieved,
    )
