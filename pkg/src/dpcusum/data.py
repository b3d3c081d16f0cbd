"""Multi-stream series, synthetic generation, CSV ingestion and model fitting.

The fitting pipeline for one stream (all statistics learned on the benign,
pre-change segment only):

    raw -> z-score -> PCA (retain r) -> z-score the components -> diagonal Gaussian

after which pre/post Gaussian models are fitted in the reduced space and
the LLR is truncated. Fitted models serialize to the same JSON schema the
model module reads, with an extra ``transform`` block per stream so a
detector can be run on raw feature rows.
"""

from __future__ import annotations

import csv
import json
import math
import os
import warnings
from dataclasses import dataclass, field

import numba
import numpy as np

from .errors import ConvergenceError, DataError, ModelError, PreconditionError
from .model import DiagGaussian, StreamModel, models_from_config
from .scenario import ChangeScenario, draw_dim, sample_block

STD_FLOOR = 1e-12
VAR_FLOOR = 1e-12
JACOBI_TOL = 1e-10
JACOBI_MAX_SWEEPS = 100


# -- series ----------------------------------------------------------------


@dataclass(frozen=True)
class MultiStreamSeries:
    """K time-aligned streams; stream k is a (T, d_k) float array."""

    streams: tuple
    ids: tuple = None
    features: tuple = None

    def __post_init__(self):
        arrs = []
        for a in self.streams:
            a = np.array(a, dtype=float)
            if a.ndim == 1:
                a = a[:, None]
            if a.ndim != 2 or a.shape[1] < 1:
                raise DataError(f"each stream must be a (T, d) matrix, got shape {a.shape}")
            a.setflags(write=False)
            arrs.append(a)
        if not arrs:
            raise DataError("a series needs at least one stream")
        lengths = {a.shape[0] for a in arrs}
        if len(lengths) != 1:
            raise DataError(f"streams must share a common length, got {sorted(lengths)}")
        object.__setattr__(self, "streams", tuple(arrs))
        ids = self.ids if self.ids is not None else tuple(str(k) for k in range(len(arrs)))
        if len(ids) != len(arrs):
            raise DataError("one id per stream required")
        object.__setattr__(self, "ids", tuple(str(i) for i in ids))

    @property
    def K(self):
        return len(self.streams)

    @property
    def T(self):
        return self.streams[0].shape[0]

    @property
    def dims(self):
        return tuple(a.shape[1] for a in self.streams)

    def stream(self, k):
        return self.streams[k]

    def rows(self):
        """Per-time lists of observations: a float for 1-d streams, a vector otherwise."""
        cols = [a[:, 0] if a.shape[1] == 1 else a for a in self.streams]
        for t in range(self.T):
            yield [float(c[t]) if c.ndim == 1 else c[t] for c in cols]

    def slice(self, start, stop):
        return MultiStreamSeries(tuple(a[start:stop] for a in self.streams), self.ids, self.features)

    def replace_cell(self, t, k, value):
        """Copy with the observation of stream ``k`` at 0-based row ``t`` replaced."""
        arrs = [a.copy() for a in self.streams]
        arrs[k][t] = value
        return MultiStreamSeries(tuple(arrs), self.ids, self.features)

    def equals(self, other):
        return (
            self.K == other.K
            and self.dims == other.dims
            and all(np.array_equal(a, b) for a, b in zip(self.streams, other.streams))
        )


def generate(scenario: ChangeScenario, T, rng, models=None) -> MultiStreamSeries:
    """Draw T steps of every stream, switching affected streams to their post law after tau.

    Consumes uniforms from ``rng`` in the same order as the Monte Carlo
    runner, so a trial's data can be regenerated from its seed.
    """
    models = models if models is not None else scenario.models
    if models is None:
        raise PreconditionError("generate needs the stream models (scenario.models or models=)")
    if int(T) < 1:
        raise PreconditionError(f"T must be >= 1, got {T}")
    T = int(T)
    scenario.check(len(models))
    dim = draw_dim(models)
    u = rng.uniforms(T * dim).reshape(T, dim)
    obs = sample_block(models, scenario, u, 0)
    return MultiStreamSeries(tuple(obs), tuple(m.stream_id or str(k) for k, m in enumerate(models)))


# -- CSV and manifest --------------------------------------------------------


def load_csv(path, stream_id=None) -> MultiStreamSeries:
    """Read one stream from a CSV with a header row of feature names."""
    names, mat = read_matrix(path)
    sid = stream_id if stream_id is not None else os.path.splitext(os.path.basename(str(path)))[0]
    return MultiStreamSeries((mat,), (sid,), (tuple(names),))


def read_matrix(source):
    """Parse a numeric CSV (path or open text file) into (header, (T, d) array)."""
    if hasattr(source, "read"):
        return _parse_rows(csv.reader(source), getattr(source, "name", "<stream>"))
    try:
        with open(source, newline="") as fh:
            return _parse_rows(csv.reader(fh), str(source))
    except OSError as exc:
        raise DataError(f"cannot read {source}: {exc}") from exc


def _parse_rows(reader, label):
    try:
        header = next(reader)
    except StopIteration:
        raise DataError(f"{label}: empty file, expected a header row") from None
    header = [h.strip() for h in header]
    d = len(header)
    rows = []
    for r, row in enumerate(reader, start=1):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != d:
            raise DataError(f"{label}: row {r} has {len(row)} fields, header has {d}")
        vals = []
        for c, cell in enumerate(row):
            try:
                v = float(cell)
            except ValueError:
                raise DataError(
                    f"{label}: row {r}, column {c + 1} ({header[c]!r}): non-numeric value {cell!r}"
                ) from None
            if not math.isfinite(v):
                raise DataError(f"{label}: row {r}, column {c + 1} ({header[c]!r}): non-finite value {cell!r}")
            vals.append(v)
        rows.append(vals)
    if not rows:
        raise DataError(f"{label}: no data rows")
    return header, np.array(rows, dtype=float)


@dataclass(frozen=True)
class ManifestEntry:
    """One stream in a manifest; row ranges are 0-based, half-open [start, stop)."""

    id: str
    file: str
    pre_rows: tuple | None = None
    post_rows: tuple | None = None


def _row_range(entry, key):
    val = entry.get(key)
    if val is None:
        return None
    if not (isinstance(val, (list, tuple)) and len(val) == 2 and all(isinstance(v, int) for v in val)):
        raise DataError(f"manifest stream {entry.get('id')!r}: {key} must be [start, stop], got {val!r}")
    a, b = val
    if not 0 <= a < b:
        raise DataError(f"manifest stream {entry.get('id')!r}: {key} must satisfy 0 <= start < stop, got {val}")
    return (a, b)


def load_manifest(path):
    """Parse ``{streams: [{id, file, pre_rows, post_rows}]}``; files resolve relative to the manifest."""
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from exc
    entries = doc.get("streams") if isinstance(doc, dict) else None
    if not isinstance(entries, list) or not entries:
        raise DataError("manifest needs a non-empty 'streams' list")
    base = os.path.dirname(os.path.abspath(str(path)))
    out = []
    seen = set()
    for i, e in enumerate(entries):
        if not isinstance(e, dict) or "file" not in e:
            raise DataError(f"manifest entry {i} needs a 'file'")
        sid = str(e.get("id", i))
        if sid in seen:
            raise DataError(f"duplicate stream id {sid!r} in manifest")
        seen.add(sid)
        pre, post = _row_range(e, "pre_rows"), _row_range(e, "post_rows")
        if pre and post and pre[0] < post[1] and post[0] < pre[1]:
            raise DataError(f"manifest stream {sid!r}: pre_rows {list(pre)} and post_rows {list(post)} overlap")
        out.append(ManifestEntry(sid, os.path.join(base, e["file"]), pre, post))
    return out


def load_manifest_series(path) -> MultiStreamSeries:
    """All rows of every manifest file as one series (streams must have equal length)."""
    entries = load_manifest(path)
    mats, names = [], []
    for e in entries:
        header, mat = read_matrix(e.file)
        mats.append(mat)
        names.append(tuple(header))
    return MultiStreamSeries(tuple(mats), tuple(e.id for e in entries), tuple(names))


# -- standardization -----------------------------------------------------------


@dataclass(frozen=True)
class Standardizer:
    """Per-feature z-scoring with sample (ddof=1) standard deviations."""

    mean: np.ndarray
    std: np.ndarray

    def apply(self, x):
        return (np.asarray(x, dtype=float) - self.mean) / self.std

    def to_dict(self):
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, obj):
        return cls(np.asarray(obj["mean"], dtype=float), np.asarray(obj["std"], dtype=float))


def fit_standardizer(train) -> Standardizer:
    x = _matrix(train, "standardizer training data")
    if x.shape[0] < 2:
        raise DataError(f"standardizer needs >= 2 training rows, got {x.shape[0]}")
    mean = x.mean(axis=0)
    std = np.sqrt(((x - mean) ** 2).sum(axis=0) / (x.shape[0] - 1))
    low = std < STD_FLOOR
    if low.any():
        warnings.warn(
            f"{int(low.sum())} constant feature(s) (columns {np.flatnonzero(low).tolist()[:10]}); std floored at {STD_FLOOR}",
            RuntimeWarning,
            stacklevel=2,
        )
        std = np.where(low, STD_FLOOR, std)
    return Standardizer(mean, std)


def apply(std: Standardizer, series):
    return std.apply(series)


def _matrix(x, what):
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2:
        raise DataError(f"{what} must be a 2-D matrix, got shape {x.shape}")
    return x


# -- PCA -----------------------------------------------------------------------------


@numba.njit(cache=True)
def _jacobi_kernel(A, V, tol, max_sweeps):
    n = A.shape[0]
    for sweep in range(max_sweeps + 1):
        off = 0.0
        for p in range(n):
            for q in range(p + 1, n):
                off += 2.0 * A[p, q] * A[p, q]
        if math.sqrt(off) <= tol:
            return sweep
        if sweep == max_sweeps:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = A[p, q]
                if apq == 0.0:
                    continue
                theta = (A[q, q] - A[p, p]) / (2.0 * apq)
                t = 1.0 / (abs(theta) + math.sqrt(theta * theta + 1.0))
                if theta < 0.0:
                    t = -t
                c = 1.0 / math.sqrt(t * t + 1.0)
                s = t * c
                for k in range(n):
                    akp = A[k, p]
                    akq = A[k, q]
                    A[k, p] = c * akp - s * akq
                    A[k, q] = s * akp + c * akq
                for k in range(n):
                    apk = A[p, k]
                    aqk = A[q, k]
                    A[p, k] = c * apk - s * aqk
                    A[q, k] = s * apk + c * aqk
                A[p, q] = 0.0
                A[q, p] = 0.0
                for k in range(n):
                    vkp = V[k, p]
                    vkq = V[k, q]
                    V[k, p] = c * vkp - s * vkq
                    V[k, q] = s * vkp + c * vkq
    return -1


def jacobi_eigh(a, tol=JACOBI_TOL, max_sweeps=JACOBI_MAX_SWEEPS):
    """Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.

    Sweeps until the Frobenius norm of the off-diagonal part is at most
    ``tol * max(1, ||a||_F)``. Returns (eigenvalues, eigenvectors as columns),
    sorted by decreasing eigenvalue.
    """
    A = np.array(a, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise PreconditionError(f"need a square matrix, got shape {A.shape}")
    if not np.allclose(A, A.T, rtol=0, atol=1e-12 * max(1.0, np.abs(A).max(initial=0.0))):
        raise PreconditionError("matrix is not symmetric")
    A = 0.5 * (A + A.T)
    scale = max(1.0, float(np.linalg.norm(A)))
    V = np.eye(A.shape[0])
    sweeps = _jacobi_kernel(A, V, tol * scale, max_sweeps)
    if sweeps < 0:
        raise ConvergenceError(f"Jacobi eigen-solver did not converge in {max_sweeps} sweeps")
    w = np.diag(A).copy()
    order = np.argsort(-w, kind="stable")
    return w[order], V[:, order]


@dataclass(frozen=True)
class PcaProjection:
    mean: np.ndarray
    components: np.ndarray  # (original_dim, retained)
    eigenvalues: np.ndarray  # full spectrum, descending

    @property
    def retained(self):
        return self.components.shape[1]

    @property
    def retained_eigenvalues(self):
        return self.eigenvalues[: self.retained]

    def transform(self, x):
        return (np.asarray(x, dtype=float) - self.mean) @ self.components

    def to_dict(self):
        return {
            "mean": self.mean.tolist(),
            "components": self.components.tolist(),
            "eigenvalues": self.eigenvalues.tolist(),
        }

    @classmethod
    def from_dict(cls, obj):
        comps = np.asarray(obj["components"], dtype=float)
        if comps.ndim == 1:
            comps = comps[:, None]
        return cls(np.asarray(obj["mean"], dtype=float), comps, np.asarray(obj["eigenvalues"], dtype=float))


def covariance(x):
    """Sample covariance by two passes: the mean first, then centered cross products."""
    x = _matrix(x, "covariance input")
    mean = x.mean(axis=0)
    xc = x - mean
    return mean, (xc.T @ xc) / (x.shape[0] - 1)


def pca_fit(train, retain) -> PcaProjection:
    x = _matrix(train, "PCA training data")
    n, d = x.shape
    if not 1 <= retain <= d:
        raise PreconditionError(f"retain must be in [1, {d}], got {retain}")
    if n <= retain:
        raise PreconditionError(f"PCA needs more training rows ({n}) than retained components ({retain})")
    mean, cov = covariance(x)
    w, V = jacobi_eigh(cov)
    # sign convention: largest-magnitude entry of each component is positive
    idx = np.argmax(np.abs(V), axis=0)
    signs = np.sign(V[idx, np.arange(d)])
    signs[signs == 0] = 1.0
    V = V * signs
    return PcaProjection(mean, V[:, :retain].copy(), w)


def pca_transform(proj: PcaProjection, series):
    return proj.transform(series)


# -- Gaussian fitting -----------------------------------------------------------------


def _diag_gaussian(x):
    mu = x.mean(axis=0)
    var = ((x - mu) ** 2).sum(axis=0) / (x.shape[0] - 1)
    return DiagGaussian(tuple(mu), tuple(np.sqrt(np.maximum(var, VAR_FLOOR))))


def fit_gaussian_models(pre_segment, post_segment, trunc_level, stream_id=None) -> StreamModel:
    """Diagonal-Gaussian pre/post model from two segments, LLR truncated at ``trunc_level``.

    ``trunc_level=None`` builds an untruncated model (not detector-ready
    unless the two fits share variances, and even then unbounded).
    """
    pre = _matrix(pre_segment, "pre-change segment")
    post = _matrix(post_segment, "post-change segment")
    if pre.shape[0] < 2 or post.shape[0] < 2:
        raise DataError(f"need >= 2 rows per segment, got {pre.shape[0]} and {post.shape[0]}")
    if pre.shape[1] != post.shape[1]:
        raise DataError(f"segment dimensions differ: {pre.shape[1]} vs {post.shape[1]}")
    return StreamModel(_diag_gaussian(pre), _diag_gaussian(post), trunc_level, stream_id)


def auto_trunc_level(pairs, fraction=0.5, start=0.25, max_doublings=40):
    """Smallest level on the grid start * 2^j at which every stream keeps
    ``fraction`` of its KL information after truncation.

    ``pairs`` is a sequence of (pre, post) distributions.
    """
    level = float(start)
    for _ in range(max_doublings + 1):
        ok = True
        for pre, post in pairs:
            m = StreamModel(pre, post, level, check=False)
            i0, i1 = m.truncated_info
            if not (i0 > 0 and i1 > 0 and i0 >= fraction * m.kl_info):
                ok = False
                break
        if ok:
            return level
        level *= 2.0
    raise ModelError(
        f"no truncation level up to {level / 2:g} keeps {fraction:.0%} of the information; "
        "pre and post segments may be indistinguishable"
    )


# -- end-to-end pipeline -------------------------------------------------------------------


@dataclass(frozen=True)
class StreamTransform:
    """Raw feature row -> standardized principal components."""

    scaler: Standardizer
    pca: PcaProjection
    rescale: Standardizer

    @property
    def raw_dim(self):
        return self.scaler.mean.shape[0]

    def apply(self, x):
        return self.rescale.apply(self.pca.transform(self.scaler.apply(x)))

    def to_dict(self):
        return {"standardize": self.scaler.to_dict(), "pca": self.pca.to_dict(), "rescale": self.rescale.to_dict()}

    @classmethod
    def from_dict(cls, obj):
        return cls(
            Standardizer.from_dict(obj["standardize"]),
            PcaProjection.from_dict(obj["pca"]),
            Standardizer.from_dict(obj["rescale"]),
        )


def fit_transform(train, retain) -> StreamTransform:
    x = _matrix(train, "training data")
    scaler = fit_standardizer(x)
    z = scaler.apply(x)
    pca = pca_fit(z, retain)
    rescale = fit_standardizer(pca.transform(z))
    return StreamTransform(scaler, pca, rescale)


@dataclass(frozen=True)
class FittedModels:
    models: tuple
    transforms: tuple
    trunc_level: float
    retain: int | None = None
    extra: dict = field(default_factory=dict)

    def apply(self, series: MultiStreamSeries) -> MultiStreamSeries:
        """Map raw streams into the models' reduced space."""
        if series.K != len(self.models):
            raise DataError(f"series has {series.K} streams, models expect {len(self.models)}")
        out = []
        for k, (x, tr) in enumerate(zip(series.streams, self.transforms)):
            if tr is None:
                out.append(x)
                continue
            if x.shape[1] != tr.raw_dim:
                raise DataError(f"stream {series.ids[k]!r}: {x.shape[1]} raw features, transform expects {tr.raw_dim}")
            out.append(tr.apply(x))
        return MultiStreamSeries(tuple(out), series.ids)

    def to_config(self):
        streams = []
        for m, tr in zip(self.models, self.transforms):
            entry = m.to_dict()
            if tr is not None:
                entry["transform"] = tr.to_dict()
            streams.append(entry)
        return {"trunc_level": self.trunc_level, "retain": self.retain, "streams": streams, **self.extra}


def load_fitted(config) -> FittedModels:
    """Inverse of ``FittedModels.to_config``; plain model configs get identity transforms."""
    entries = config["streams"] if isinstance(config, dict) else config
    models = tuple(models_from_config(entries))
    transforms = tuple(
        StreamTransform.from_dict(e["transform"]) if isinstance(e, dict) and "transform" in e else None
        for e in entries
    )
    trunc = config.get("trunc_level") if isinstance(config, dict) else None
    retain = config.get("retain") if isinstance(config, dict) else None
    return FittedModels(models, transforms, trunc, retain)


def fit_pipeline(pre_segments, post_segments, ids=None, retain=5, trunc_level="auto", fraction=0.5):
    """Fit transform + truncated diagonal-Gaussian model for every stream.

    ``trunc_level="auto"`` picks one level for all streams with
    :func:`auto_trunc_level`.
    """
    if len(pre_segments) != len(post_segments) or not pre_segments:
        raise DataError("need one (pre, post) segment pair per stream")
    ids = ids if ids is not None else [str(k) for k in range(len(pre_segments))]
    transforms, reduced = [], []
    for pre, post in zip(pre_segments, post_segments):
        pre, post = _matrix(pre, "pre segment"), _matrix(post, "post segment")
        tr = fit_transform(pre, retain)
        transforms.append(tr)
        reduced.append((tr.apply(pre), tr.apply(post)))
    pairs = [(_diag_gaussian(a), _diag_gaussian(b)) for a, b in reduced]
    level = auto_trunc_level(pairs, fraction) if trunc_level == "auto" else float(trunc_level)
    models = tuple(fit_gaussian_models(a, b, level, sid) for (a, b), sid in zip(reduced, ids))
    return FittedModels(models, tuple(transforms), level, retain)


def fit_manifest(path, retain=5, trunc_level="auto", fraction=0.5) -> FittedModels:
    entries = load_manifest(path)
    pres, posts = [], []
    for e in entries:
        if e.pre_rows is None or e.post_rows is None:
            raise DataError(f"manifest stream {e.id!r} needs pre_rows and post_rows for fitting")
        _, mat = read_matrix(e.file)
        for key, (a, b) in (("pre_rows", e.pre_rows), ("post_rows", e.post_rows)):
            if b > mat.shape[0]:
                raise DataError(f"stream {e.id!r}: {key} [{a}, {b}) exceeds the {mat.shape[0]} rows of {e.file}")
        pres.append(mat[e.pre_rows[0]:e.pre_rows[1]])
        posts.append(mat[e.post_rows[0]:e.post_rows[1]])
    return fit_pipeline(pres, posts, [e.id for e in entries], retain, trunc_level, fraction)
