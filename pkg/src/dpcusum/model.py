"""Per-stream density models, log-likelihood ratios and information numbers.

Three families are supported: location Laplace, scalar Gaussian and
diagonal multivariate Gaussian. A :class:`StreamModel` pairs a pre-change
and a post-change density of the same family and exposes the quantities the
detector and the theory evaluators need:

* ``llr`` / ``truncated_llr`` / ``score`` (the per-step CUSUM increment),
* ``sensitivity`` (range of the increment over all observations),
* ``kl_info`` and ``truncated_info`` (drift of the increment before/after
  the change).

An unbounded sensitivity is represented by ``math.inf``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import InitVar, dataclass
from functools import cached_property
from typing import ClassVar, Sequence

import numpy as np
from scipy.optimize import brentq
from scipy.special import ndtri

from .errors import DimensionError, ModelError, QuadratureError
from .quadrature import adaptive_simpson

UNBOUNDED = math.inf
QUAD_TOL = 1e-8
QUAD_DEPTH = 40
_LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)


def _positive(name, value):
    value = float(value)
    if not (math.isfinite(value) and value > 0.0):
        raise ModelError(f"{name} must be finite and > 0, got {value}")
    return value


def _finite(name, value):
    value = float(value)
    if not math.isfinite(value):
        raise ModelError(f"{name} must be finite, got {value}")
    return value


# -- distribution families -------------------------------------------------


@dataclass(frozen=True)
class LaplaceLoc:
    mu: float
    scale: float

    family: ClassVar[str] = "laplace"
    dim: ClassVar[int] = 1

    def __post_init__(self):
        object.__setattr__(self, "mu", _finite("mu", self.mu))
        object.__setattr__(self, "scale", _positive("scale", self.scale))

    def logpdf(self, x):
        return -np.abs(np.asarray(x, dtype=float) - self.mu) / self.scale - math.log(2.0 * self.scale)

    def sample(self, u):
        """Inverse-CDF transform of open-interval uniforms of shape ``(n, 1)`` or ``(n,)``."""
        u = np.asarray(u, dtype=float).reshape(-1)
        tail = np.log(2.0 * np.minimum(u, 1.0 - u))
        return self.mu - self.scale * np.sign(u - 0.5) * tail

    def quad_domain(self):
        return self.mu - 30.0 * self.scale, self.mu + 30.0 * self.scale

    def params(self):
        return {"mu": self.mu, "scale": self.scale}


@dataclass(frozen=True)
class Gaussian:
    mu: float
    sigma: float

    family: ClassVar[str] = "gaussian"
    dim: ClassVar[int] = 1

    def __post_init__(self):
        object.__setattr__(self, "mu", _finite("mu", self.mu))
        object.__setattr__(self, "sigma", _positive("sigma", self.sigma))

    def logpdf(self, x):
        z = (np.asarray(x, dtype=float) - self.mu) / self.sigma
        return -0.5 * z * z - math.log(self.sigma) - _LOG_SQRT_2PI

    def sample(self, u):
        u = np.asarray(u, dtype=float).reshape(-1)
        return self.mu + self.sigma * ndtri(u)

    def quad_domain(self):
        return self.mu - 12.0 * self.sigma, self.mu + 12.0 * self.sigma

    def params(self):
        return {"mu": self.mu, "sigma": self.sigma}


@dataclass(frozen=True)
class DiagGaussian:
    mu: tuple
    sigma: tuple

    family: ClassVar[str] = "diag_gaussian"

    def __post_init__(self):
        mu = tuple(_finite("mu", m) for m in np.ravel(self.mu))
        sigma = tuple(_positive("sigma", s) for s in np.ravel(self.sigma))
        if len(mu) == 0 or len(mu) != len(sigma):
            raise ModelError(
                f"DiagGaussian needs mu and sigma of equal length >= 1, got {len(mu)} and {len(sigma)}"
            )
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "sigma", sigma)

    @property
    def dim(self):
        return len(self.mu)

    def logpdf(self, x):
        x = np.asarray(x, dtype=float)
        z = (x - np.asarray(self.mu)) / np.asarray(self.sigma)
        per_dim = -0.5 * z * z - np.log(np.asarray(self.sigma)) - _LOG_SQRT_2PI
        return per_dim.sum(axis=-1)

    def sample(self, u):
        u = np.asarray(u, dtype=float).reshape(-1, self.dim)
        return np.asarray(self.mu) + np.asarray(self.sigma) * ndtri(u)

    def marginal(self, j):
        return Gaussian(self.mu[j], self.sigma[j])

    def params(self):
        return {"mu": list(self.mu), "sigma": list(self.sigma)}


FAMILIES = {cls.family: cls for cls in (LaplaceLoc, Gaussian, DiagGaussian)}


def distribution_from_dict(obj):
    try:
        family = obj["family"]
        params = obj["params"]
    except (KeyError, TypeError) as exc:
        raise ModelError(f"distribution needs 'family' and 'params': {obj!r}") from exc
    if family not in FAMILIES:
        raise ModelError(f"unknown family {family!r}; expected one of {sorted(FAMILIES)}")
    try:
        return FAMILIES[family](**params)
    except TypeError as exc:
        raise ModelError(f"bad parameters for {family}: {params!r}") from exc


def distribution_to_dict(dist):
    return {"family": dist.family, "params": dist.params()}


# -- stream model ----------------------------------------------------------


@dataclass(frozen=True)
class StreamModel:
    """A (pre-change, post-change) density pair for one stream.

    With ``trunc_level`` set, the CUSUM increment is the LLR clipped to
    ``[-trunc_level/2, trunc_level/2]`` and construction checks that both
    truncated information numbers are positive. Pass ``check=False`` to
    build a model for analysis only (for instance pre == post).
    """

    pre: object
    post: object
    trunc_level: float | None = None
    stream_id: str | None = None
    check: InitVar[bool] = True

    def __post_init__(self, check):
        if type(self.pre) is not type(self.post):
            raise ModelError(
                f"stream {self.stream_id!r}: unsupported family pairing "
                f"{self.pre.family} -> {self.post.family}"
            )
        if self.pre.dim != self.post.dim:
            raise ModelError(
                f"stream {self.stream_id!r}: pre has dimension {self.pre.dim}, post {self.post.dim}"
            )
        if self.trunc_level is not None:
            object.__setattr__(self, "trunc_level", _positive("trunc_level", self.trunc_level))
            if check:
                i0, i1 = self.truncated_info
                if not (i0 > 0.0 and i1 > 0.0):
                    raise ModelError(
                        f"stream {self.stream_id!r}: truncation level {self.trunc_level} fails the "
                        f"validity condition (tilde_I0={i0:.6g}, tilde_I1={i1:.6g}); "
                        "use a larger truncation level or better-separated segments"
                    )

    @property
    def dim(self):
        return self.pre.dim

    @property
    def family(self):
        return self.pre.family

    @property
    def truncated(self):
        return self.trunc_level is not None

    # observations -------------------------------------------------------

    def _check_obs(self, x):
        x = np.asarray(x, dtype=float)
        d = self.dim
        if isinstance(self.pre, DiagGaussian):
            if x.ndim == 0 and d == 1:
                x = x.reshape(1)
            if x.ndim == 0 or x.shape[-1] != d:
                raise DimensionError(self.stream_id, d, x.shape[-1] if x.ndim else 1)
        elif x.ndim > 1 and x.shape[-1] != 1:
            raise DimensionError(self.stream_id, d, x.shape[-1])
        elif x.ndim > 1:
            x = x[..., 0]
        return x

    def llr(self, x):
        """log f1(x) - log f0(x), evaluated in log space; vectorized over leading axes."""
        x = self._check_obs(x)
        pre, post = self.pre, self.post
        if isinstance(pre, LaplaceLoc) and pre.scale == post.scale:
            # constant outside [mu0, mu1]; clipping first keeps large |x| from cancelling
            x = np.clip(x, min(pre.mu, post.mu), max(pre.mu, post.mu))
        out = post.logpdf(x) - pre.logpdf(x)
        return float(out) if np.ndim(out) == 0 else out

    def truncated_llr(self, x):
        if self.trunc_level is None:
            raise ModelError(f"stream {self.stream_id!r}: truncation not configured")
        half = self.trunc_level / 2.0
        out = np.clip(self.llr(x), -half, half)
        return float(out) if np.ndim(out) == 0 else out

    def score(self, x):
        """The per-step CUSUM increment: truncated LLR when truncation is on."""
        return self.truncated_llr(x) if self.truncated else self.llr(x)

    # sensitivity --------------------------------------------------------

    @cached_property
    def raw_sensitivity(self):
        """sup_{x,y} |llr(x) - llr(y)| for the untruncated LLR."""
        pre, post = self.pre, self.post
        if pre == post:
            return 0.0
        if isinstance(pre, LaplaceLoc):
            if pre.scale != post.scale:
                warnings.warn(
                    f"stream {self.stream_id!r}: Laplace scales differ ({pre.scale} vs {post.scale}); "
                    "the LLR is unbounded, configure a truncation level",
                    stacklevel=2,
                )
                return UNBOUNDED
            return 2.0 * abs(post.mu - pre.mu) / pre.scale
        # any Gaussian change gives an affine or quadratic LLR on an unbounded support
        return UNBOUNDED

    @property
    def sensitivity(self):
        if self.trunc_level is not None:
            return self.trunc_level
        return self.raw_sensitivity

    @property
    def detector_ready(self):
        return math.isfinite(self.sensitivity)

    # information numbers ------------------------------------------------

    @cached_property
    def kl_info(self):
        """E_post[llr]: KL divergence of the post-change from the pre-change law."""
        pre, post = self.pre, self.post
        if isinstance(pre, Gaussian):
            return _gauss_kl(post.mu, post.sigma, pre.mu, pre.sigma)
        if isinstance(pre, DiagGaussian):
            return math.fsum(
                _gauss_kl(m1, s1, m0, s0)
                for m1, s1, m0, s0 in zip(post.mu, post.sigma, pre.mu, pre.sigma)
            )
        if pre.scale == post.scale:
            m = abs(post.mu - pre.mu) / pre.scale
            return m + math.expm1(-m)
        return _expect_scalar(self, post, self.llr)

    @cached_property
    def truncated_info(self):
        """(tilde_I0, tilde_I1) = (E_post[clipped llr], -E_pre[clipped llr])."""
        if self.trunc_level is None:
            raise ModelError(f"stream {self.stream_id!r}: truncation not configured")
        if self.pre == self.post:
            return 0.0, 0.0
        if isinstance(self.pre, DiagGaussian):
            i0 = _diag_truncated_mean(self, self.post)
            i1 = -_diag_truncated_mean(self, self.pre)
        else:
            i0 = _expect_scalar(self, self.post, self.truncated_llr)
            i1 = -_expect_scalar(self, self.pre, self.truncated_llr)
        return i0, i1

    @property
    def drift_info(self):
        """Post-change drift of the CUSUM increment (truncated when truncation is on)."""
        return self.truncated_info[0] if self.truncated else self.kl_info

    # serialization -------------------------------------------------------

    def to_dict(self):
        out = {
            "stream_id": self.stream_id,
            "pre": distribution_to_dict(self.pre),
            "post": distribution_to_dict(self.post),
        }
        if self.trunc_level is not None:
            out["trunc_level"] = self.trunc_level
        return out

    @classmethod
    def from_dict(cls, obj, check=True):
        try:
            pre = distribution_from_dict(obj["pre"])
            post = distribution_from_dict(obj["post"])
        except KeyError as exc:
            raise ModelError(f"stream entry missing {exc.args[0]!r}: {obj!r}") from exc
        sid = obj.get("stream_id")
        return cls(pre, post, obj.get("trunc_level"), None if sid is None else str(sid), check=check)


def _gauss_kl(m1, s1, m0, s0):
    # KL(N(m1, s1^2) || N(m0, s0^2))
    return math.log(s0 / s1) + (s1 * s1 + (m1 - m0) ** 2) / (2.0 * s0 * s0) - 0.5


# -- numerical expectations ------------------------------------------------


def _clip_points(fn, lo, hi, levels):
    """Points in (lo, hi) where fn crosses one of ``levels`` (kinks of a clipped LLR)."""
    grid = np.linspace(lo, hi, 4001)
    vals = np.asarray(fn(grid), dtype=float)
    points = []
    for level in levels:
        g = vals - level
        idx = np.nonzero(np.sign(g[:-1]) * np.sign(g[1:]) < 0)[0]
        for i in idx:
            points.append(brentq(lambda x: float(fn(np.array([x]))[0]) - level, grid[i], grid[i + 1], xtol=1e-14))
    return points


def _expect_scalar(model, dist, fn):
    """E_dist[fn(X)] for a scalar family by adaptive Simpson on a truncated domain."""
    lo, hi = dist.quad_domain()
    breaks = [model.pre.mu, model.post.mu]
    if model.trunc_level is not None:
        half = model.trunc_level / 2.0
        breaks += _clip_points(model.llr, lo, hi, (-half, half))

    def integrand(x):
        return np.exp(dist.logpdf(x)) * fn(x)

    return adaptive_simpson(integrand, lo, hi, tol=QUAD_TOL, max_depth=QUAD_DEPTH, breakpoints=breaks, panels=8)


def _quadratic_coeffs(model):
    """Per-dimension llr_j(x) = a x^2 + b x + c for a diagonal Gaussian pair."""
    m0, s0 = np.asarray(model.pre.mu), np.asarray(model.pre.sigma)
    m1, s1 = np.asarray(model.post.mu), np.asarray(model.post.sigma)
    a = 0.5 / s0**2 - 0.5 / s1**2
    b = m1 / s1**2 - m0 / s0**2
    c = 0.5 * m0**2 / s0**2 - 0.5 * m1**2 / s1**2 + np.log(s0 / s1)
    return a, b, c


def _diag_truncated_mean(model, dist):
    """E_dist[clip(llr(X), -h, h)] for a diagonal Gaussian pair.

    Under ``dist`` each coordinate term is A Z^2 + B Z + C with Z standard
    normal, so the summed LLR has a closed-form characteristic function phi
    and E[clip(L, -h, h)] = (2/pi) * int_0^inf Im phi(t) sin(h t) / t^2 dt.
    When the LLR is affine the sum is Gaussian and a 1-D integral over its
    value is used instead.
    """
    half = model.trunc_level / 2.0
    a, b, c = _quadratic_coeffs(model)
    m, v = np.asarray(dist.mu), np.asarray(dist.sigma) ** 2
    A = a * v
    B = (2.0 * a * m + b) * np.sqrt(v)
    C = a * m * m + b * m + c

    if np.all(A == 0.0):
        mean, sd = float(C.sum()), float(np.sqrt(np.sum(B * B)))
        if sd == 0.0:
            return float(np.clip(mean, -half, half))
        lo, hi = mean - 12.0 * sd, mean + 12.0 * sd

        def integrand(y):
            z = (y - mean) / sd
            return np.exp(-0.5 * z * z - _LOG_SQRT_2PI) / sd * np.clip(y, -half, half)

        return adaptive_simpson(
            integrand, lo, hi, tol=QUAD_TOL, max_depth=QUAD_DEPTH, breakpoints=(-half, half), panels=8
        )

    mean_l = float(np.sum(A + C))

    def log_phi(t):
        t = t[:, None]
        q = 1.0 - 2j * t * A
        return np.sum(1j * t * C - 0.5 * np.log(q) - (t * t) * (B * B) / (2.0 * q), axis=1)

    def abs_phi(t):
        r = 1.0 + 4.0 * t * t * A * A
        return float(np.prod(r ** -0.25 * np.exp(-(t * t) * B * B / (2.0 * r))))

    # tail of the integral beyond T is at most (2/pi) |phi(T)| / T
    T = 1.0
    while (2.0 / math.pi) * abs_phi(T) / T > QUAD_TOL / 10.0:
        T *= 2.0
        if T > 1e9:
            raise QuadratureError("characteristic function decays too slowly", achieved=abs_phi(T) / T)

    def integrand(t):
        out = np.empty_like(t)
        small = t < 1e-8
        out[small] = half * mean_l
        ts = t[~small]
        out[~small] = np.exp(log_phi(ts)).imag * np.sin(half * ts) / (ts * ts)
        return out

    freq = half + float(np.sum(np.abs(C))) + float(np.sum(np.abs(A))) + 1.0
    panels = int(min(200_000, max(64, math.ceil(T * freq / (math.pi / 4.0)))))
    integral = adaptive_simpson(
        integrand, 0.0, T, tol=QUAD_TOL * math.pi / 2.0, max_depth=QUAD_DEPTH, panels=panels
    )
    return 2.0 / math.pi * integral


# -- module-level surface ----------------------------------------------------


def llr(model, x):
    return model.llr(x)


def truncated_llr(model, x):
    return model.truncated_llr(x)


def sensitivity(model):
    return model.sensitivity


def global_sensitivity(models: Sequence[StreamModel]) -> float:
    """Largest per-stream sensitivity (clip range for truncated streams)."""
    if not models:
        raise ModelError("at least one stream model is required")
    offenders = [m.stream_id if m.stream_id is not None else i for i, m in enumerate(models) if not m.detector_ready]
    if offenders:
        raise ModelError(
            f"streams with unbounded LLR and no truncation level: {offenders}; set trunc_level"
        )
    return max(m.sensitivity for m in models)


def kl_info(model):
    return model.kl_info


def truncated_info(model):
    return model.truncated_info


def models_from_config(entries, check=True):
    """Parse the JSON model configuration: a list of stream entries."""
    if isinstance(entries, dict) and "streams" in entries:
        entries = entries["streams"]
    if not isinstance(entries, list) or not entries:
        raise ModelError("model configuration must be a non-empty list of stream entries")
    models = []
    for i, entry in enumerate(entries):
        model = StreamModel.from_dict(entry, check=check)
        if model.stream_id is None:
            model = StreamModel(model.pre, model.post, model.trunc_level, str(i), check=False)
        models.append(model)
    return models


def models_to_config(models):
    return [m.to_dict() for m in models]
