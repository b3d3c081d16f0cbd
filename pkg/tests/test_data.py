import json
import math
import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dpcusum.data import (
    MultiStreamSeries,
    auto_trunc_level,
    covariance,
    fit_gaussian_models,
    fit_manifest,
    fit_pipeline,
    fit_standardizer,
    generate,
    jacobi_eigh,
    load_csv,
    load_fitted,
    load_manifest,
    pca_fit,
    pca_transform,
)
from dpcusum.engine import DetectorConfig, run
from dpcusum.errors import ConvergenceError, DataError, ModelError, PreconditionError
from dpcusum.model import Gaussian, LaplaceLoc, StreamModel
from dpcusum.noise import RngHandle
from dpcusum.presets import gauss_k5_trunc, laplace_k5
from dpcusum.scenario import ChangeScenario


def write_csv(path, header, rows):
    lines = [",".join(header)] + [",".join(str(v) for v in r) for r in rows]
    path.write_text("\n".join(lines) + "\n")


def test_generate_regimes_use_the_right_law():
    models = gauss_k5_trunc()
    u = RngHandle(3, 0, "g").uniforms(40 * 5).reshape(40, 5)
    pre = generate(ChangeScenario.no_change(), 40, RngHandle(3, 0, "g"), models)
    post = generate(ChangeScenario.immediate(range(5)), 40, RngHandle(3, 0, "g"), models)
    for k in range(5):
        assert np.allclose(pre.stream(k)[:, 0], Gaussian(0, 1).sample(u[:, k]))
        assert np.allclose(post.stream(k)[:, 0], Gaussian(0.5, 1).sample(u[:, k]))


def test_generate_switches_after_tau_only_in_affected_streams():
    models = gauss_k5_trunc()
    s = generate(ChangeScenario(10, frozenset({1})), 30, RngHandle(1, 0, "g"), models)
    ref = generate(ChangeScenario.no_change(), 30, RngHandle(1, 0, "g"), models)
    diff = np.stack([s.stream(k)[:, 0] - ref.stream(k)[:, 0] for k in range(5)], axis=1)
    assert np.allclose(diff[:10], 0) and np.allclose(diff[10:, 1], 0.5)
    assert np.allclose(np.delete(diff, 1, axis=1), 0)


def test_generate_laplace_law_of_large_numbers():
    m = laplace_k5()[:1]
    s = generate(ChangeScenario.no_change(), 10**6, RngHandle(8, 0, "lln"), m)
    assert abs(s.stream(0).mean()) < 0.005


def test_series_validation():
    with pytest.raises(DataError, match="common length"):
        MultiStreamSeries((np.zeros(3), np.zeros(4)))
    s = MultiStreamSeries((np.arange(3.0), np.ones((3, 2))))
    assert s.K == 2 and s.T == 3 and s.dims == (1, 2)
    rows = list(s.rows())
    assert rows[1][0] == 1.0 and np.array_equal(rows[1][1], [1.0, 1.0])


def test_load_csv_small(tmp_path):
    p = tmp_path / "dev.csv"
    write_csv(p, ["a", "b"], [[1, 2], [3, 4], [5, 6.5]])
    s = load_csv(p)
    assert s.T == 3 and s.dims == (2,)
    assert np.array_equal(s.stream(0), [[1, 2], [3, 4], [5, 6.5]])
    assert s.features == (("a", "b"),)


def test_load_csv_wide(tmp_path):
    p = tmp_path / "wide.csv"
    write_csv(p, [f"f{i}" for i in range(115)], np.zeros((4, 115)))
    assert load_csv(p).dims == (115,)


def test_load_csv_errors(tmp_path):
    p = tmp_path / "bad.csv"
    write_csv(p, ["a", "b"], [[1, 2], [3, "x"]])
    with pytest.raises(DataError, match=r"row 2, column 2 \('b'\)"):
        load_csv(p)
    write_csv(p, ["a", "b"], [[1, 2], [3]])
    with pytest.raises(DataError, match="row 2 has 1 fields"):
        load_csv(p)
    p.write_text("")
    with pytest.raises(DataError, match="empty"):
        load_csv(p)
    with pytest.raises(DataError):
        load_csv(tmp_path / "missing.csv")


def test_manifest_nine_devices(tmp_path):
    streams = []
    for k in range(9):
        write_csv(tmp_path / f"d{k}.csv", ["x", "y"], np.arange(20).reshape(10, 2))
        streams.append({"id": f"dev{k}", "file": f"d{k}.csv", "pre_rows": [0, 5], "post_rows": [5, 10]})
    (tmp_path / "m.json").write_text(json.dumps({"streams": streams}))
    entries = load_manifest(tmp_path / "m.json")
    assert len(entries) == 9 and entries[3].pre_rows == (0, 5)


def test_manifest_overlap_rejected(tmp_path):
    write_csv(tmp_path / "d.csv", ["x"], [[1], [2], [3]])
    (tmp_path / "m.json").write_text(json.dumps({"streams": [{"id": "a", "file": "d.csv", "pre_rows": [0, 2], "post_rows": [1, 3]}]}))
    with pytest.raises(DataError, match="overlap"):
        load_manifest(tmp_path / "m.json")


def test_standardizer_on_own_training_data():
    x = np.random.default_rng(0).normal(3.0, 7.0, size=(500, 6))
    z = fit_standardizer(x).apply(x)
    assert np.abs(z.mean(axis=0)).max() < 1e-10
    assert np.abs(z.var(axis=0, ddof=1) - 1).max() < 1e-8


def test_standardizer_constant_column_warns():
    x = np.column_stack([np.ones(10), np.arange(10.0)])
    with pytest.warns(RuntimeWarning, match="constant"):
        std = fit_standardizer(x)
    assert std.std[0] == 1e-12
    assert np.isfinite(std.apply(x)).all()
    with pytest.raises(DataError):
        fit_standardizer(np.ones((1, 3)))


def test_pca_rank_one():
    t = np.linspace(-1, 1, 50)
    x = np.column_stack([t, 2 * t])
    proj = pca_fit(x, 1)
    _, cov = covariance(x)
    assert proj.eigenvalues[0] == pytest.approx(np.trace(cov), rel=1e-12)
    assert abs(proj.eigenvalues[1]) <= 1e-10
    assert proj.components[np.argmax(np.abs(proj.components[:, 0])), 0] > 0


def test_pca_orthonormal_trace_and_covariance():
    x = np.random.default_rng(1).normal(size=(400, 10)) @ np.random.default_rng(2).normal(size=(10, 10))
    proj = pca_fit(x, 5)
    c = proj.components
    assert np.abs(c.T @ c - np.eye(5)).max() < 1e-8
    _, cov = covariance(x)
    assert proj.eigenvalues.sum() == pytest.approx(np.trace(cov), abs=1e-6)
    assert (np.diff(proj.eigenvalues) <= 1e-12).all()
    y = pca_transform(proj, x)
    _, cy = covariance(y)
    assert np.allclose(cy, np.diag(proj.retained_eigenvalues), rtol=1e-6, atol=1e-6 * proj.eigenvalues[0])


def test_pca_preconditions():
    with pytest.raises(PreconditionError):
        pca_fit(np.zeros((10, 3)), 4)
    with pytest.raises(PreconditionError):
        pca_fit(np.zeros((3, 5)), 3)


@given(arrays(np.float64, (6, 6), elements=st.floats(-10, 10)))
def test_jacobi_matches_numpy_eigh(a):
    sym = a + a.T
    w, V = jacobi_eigh(sym)
    ref = np.linalg.eigvalsh(sym)[::-1]
    scale = max(1.0, np.abs(sym).max())
    assert np.allclose(w, ref, atol=1e-9 * scale)
    assert np.allclose(sym @ V, V * w, atol=1e-8 * scale)


def test_jacobi_nonconvergence_raises():
    a = np.array([[2.0, 1.0], [1.0, 3.0]])
    with pytest.raises(ConvergenceError):
        jacobi_eigh(a, max_sweeps=0)


def test_fit_gaussian_recovers_means():
    rng = np.random.default_rng(5)
    pre, post = rng.normal(0, 1, (10**5, 1)), rng.normal(0.5, 1, (10**5, 1))
    m = fit_gaussian_models(pre, post, 2.5)
    assert abs(m.pre.mu[0]) < 0.02 and abs(m.post.mu[0] - 0.5) < 0.02
    assert m.trunc_level == 2.5


def test_fit_gaussian_identical_segments_rejected():
    x = np.random.default_rng(6).normal(size=(100, 2))
    with pytest.raises(ModelError, match="larger truncation level"):
        fit_gaussian_models(x, x, 2.5)
    with pytest.raises(DataError):
        fit_gaussian_models(x[:1], x, 2.5)
    with pytest.raises(DataError):
        fit_gaussian_models(x, x[:, :1], 2.5)


def test_fitted_model_drifts_at_truncated_info():
    rng = np.random.default_rng(7)
    m = fit_gaussian_models(rng.normal(0, 1, (5000, 2)), rng.normal([0.4, -0.3], 1, (5000, 2)), 2.0)
    held_out = rng.normal([0.4, -0.3], 1, (100_000, 2))
    inc = m.score(held_out)
    assert abs(inc.mean() - m.truncated_info[0]) < 5 * inc.std() / math.sqrt(len(inc)) + 0.01


def test_auto_trunc_keeps_half_the_information():
    pairs = [(Gaussian(0, 1), Gaussian(0.5, 1)), (Gaussian(0, 1), Gaussian(2.0, 1))]
    level = auto_trunc_level(pairs)
    for pre, post in pairs:
        m = StreamModel(pre, post, level)
        assert m.truncated_info[0] >= 0.5 * m.kl_info
        if level / 2 >= 0.25:
            half = StreamModel(pre, post, level / 2, check=False)
            assert any(
                StreamModel(p, q, level / 2, check=False).truncated_info[0] < 0.5 * StreamModel(p, q).kl_info
                for p, q in pairs
            ) or half is None


def synthetic_device(rng, n, shift, loadings, noise=0.3):
    f = rng.normal(size=(n, loadings.shape[0])) + shift
    return f @ loadings + noise * rng.normal(size=(n, loadings.shape[1]))


def test_pipeline_end_to_end(tmp_path):
    rng = np.random.default_rng(11)
    streams = []
    for k in range(9):
        load = np.random.default_rng(100 + k).normal(size=(5, 115))
        benign = synthetic_device(rng, 600, 0.0, load)
        attack = synthetic_device(rng, 200, np.array([1.0, 0.5, 0, 0, 0]), load)
        write_csv(tmp_path / f"d{k}.csv", [f"f{i}" for i in range(115)], np.vstack([benign, attack]))
        streams.append({"id": f"dev{k}", "file": f"d{k}.csv", "pre_rows": [0, 600], "post_rows": [600, 800]})
    (tmp_path / "m.json").write_text(json.dumps({"streams": streams}))
    fitted = fit_manifest(tmp_path / "m.json")
    assert len(fitted.models) == 9 and all(m.dim == 5 for m in fitted.models)
    again = load_fitted(json.loads(json.dumps(fitted.to_config())))
    assert [m.to_dict() for m in again.models] == [m.to_dict() for m in fitted.models]
    # raw rows -> transforms -> detector
    test_rows = [np.vstack([synthetic_device(rng, 100, 0.0, np.random.default_rng(100 + k).normal(size=(5, 115))),
                            synthetic_device(rng, 100, np.array([1.0, 0.5, 0, 0, 0]), np.random.default_rng(100 + k).normal(size=(5, 115)))])
                 for k in range(9)]
    reduced = again.apply(MultiStreamSeries(tuple(test_rows)))
    cfg = DetectorConfig.private(again.models, 1.0, 30.0, horizon=reduced.T)
    out = run(cfg, reduced.rows(), RngHandle(0, 0, "detect:noise"))
    assert out.alarm and out.stop_time > 100


def test_fit_pipeline_fixed_level():
    rng = np.random.default_rng(12)
    fm = fit_pipeline([rng.normal(size=(300, 8))], [rng.normal(0.8, 1, size=(100, 8))], retain=3, trunc_level=4.0)
    assert fm.trunc_level == 4.0 and fm.models[0].dim == 3
