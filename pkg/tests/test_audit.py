import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dpcusum.audit import (
    NeighborEdit,
    empirical_privacy_ratio,
    make_neighbor,
    pair_gaps,
    sensitivity_check,
)
from dpcusum.data import MultiStreamSeries
from dpcusum.engine import DetectorConfig
from dpcusum.errors import DimensionError, PreconditionError
from dpcusum.model import Gaussian, StreamModel
from dpcusum.noise import RngHandle
from dpcusum.presets import gauss_k5_trunc, laplace_k5

B = 1e6


def small_series():
    return MultiStreamSeries((np.arange(4.0), np.arange(4.0) * 10))


def test_make_neighbor_replaces_one_cell():
    s = small_series()
    n = make_neighbor(s, NeighborEdit(2, 1, 99.0))
    assert n.stream(1)[2, 0] == 99.0
    assert np.array_equal(n.stream(0), s.stream(0))
    diff = n.stream(1)[:, 0] != s.stream(1)[:, 0]
    assert diff.tolist() == [False, False, True, False]
    assert s.stream(1)[2, 0] == 20.0


def test_make_neighbor_errors():
    s = small_series()
    with pytest.raises(PreconditionError, match="row 4"):
        make_neighbor(s, NeighborEdit(4, 0, 1.0))
    with pytest.raises(PreconditionError, match="stream 2"):
        make_neighbor(s, NeighborEdit(0, 2, 1.0))
    with pytest.raises(DimensionError):
        make_neighbor(s, NeighborEdit(0, 0, [1.0, 2.0]))


@given(st.integers(0, 3), st.integers(0, 1), st.floats(-1e6, 1e6))
def test_neighbor_is_reversible(t0, k0, v):
    s = small_series()
    n = make_neighbor(s, NeighborEdit(t0, k0, v))
    back = make_neighbor(n, NeighborEdit(t0, k0, s.stream(k0)[t0]))
    assert back.equals(s)


def test_gap_confined_to_edited_stream():
    models = laplace_k5()[:3]
    rng = np.random.default_rng(0)
    s = MultiStreamSeries(tuple(rng.normal(size=30) for _ in range(3)))
    n = make_neighbor(s, NeighborEdit(7, 1, B))
    per, total = pair_gaps(models, s, n)
    assert np.all(per[:, [0, 2]] == 0)
    assert np.all(per[:7] == 0)
    assert per[:, 1].max() <= models[1].sensitivity + 1e-12
    assert np.allclose(total, per[:, 1])


def test_sensitivity_single_stream():
    m = [StreamModel(Gaussian(0, 1), Gaussian(1, 1), 1.5)]
    cfg = DetectorConfig.private(m, 1.0, 5.0)
    rep = sensitivity_check(cfg, 300, 40, RngHandle(1, 0, "audit"))
    assert rep.passed and rep.streams_passed
    assert 0 < rep.max_gap <= rep.delta_max + 1e-9


@pytest.mark.parametrize("models", [laplace_k5(), gauss_k5_trunc()], ids=["laplace", "gauss"])
def test_sensitivity_presets_with_extreme_edits(models):
    cfg = DetectorConfig.private(models, 0.5, 10.0)
    rep = sensitivity_check(cfg, 300, 40, RngHandle(2, 0, "audit"))
    assert rep.passed and rep.streams_passed
    # extreme edits saturate the clip, so the bound is nearly attained
    assert rep.max_gap > 0.5 * rep.delta_max
    assert rep.to_dict()["pass"] is True


def adversarial_pair():
    rows = [(B, -B), (-B, B), (B, B), (-B, B), (-B, -B)]
    series = MultiStreamSeries((np.array([r[0] for r in rows]), np.array([r[1] for r in rows])))
    return series, NeighborEdit(1, 0, B)


def test_ratio_audit_correct_noise_passes():
    series, edit = adversarial_pair()
    cfg = DetectorConfig.private(laplace_k5()[:2], 1.0, 0.0)
    rep = empirical_privacy_ratio(cfg, series, edit, 10**6, RngHandle(4, 0, "ratio"))
    assert rep.status == "pass"
    assert rep.max_abs_log_ratio <= 1.0
    assert rep.rows[-1]["n"] == ">5"


def test_ratio_audit_flags_misscaled_noise():
    series, edit = adversarial_pair()
    models = laplace_k5()[:2]
    cfg = DetectorConfig.private(models, 1.0, 0.0)
    # noise at delta/eps instead of 2 delta/eps
    rep = empirical_privacy_ratio(cfg, series, edit, 10**6, RngHandle(4, 0, "ratio"), noise_scale=cfg.delta_max)
    assert rep.status == "violation"
    assert rep.max_abs_log_ratio > 1.0
    assert any(r.get("flag") for r in rep.rows)


def test_ratio_audit_large_epsilon_passes():
    series, edit = adversarial_pair()
    cfg = DetectorConfig.private(laplace_k5()[:2], 5.0, 0.0)
    rep = empirical_privacy_ratio(cfg, series, edit, 10**6, RngHandle(5, 0, "ratio"))
    assert rep.status == "pass"


def test_ratio_audit_zero_mode_inconclusive():
    series, edit = adversarial_pair()
    cfg = DetectorConfig.nonprivate(laplace_k5()[:2], 0.0)
    rep = empirical_privacy_ratio(cfg, series, edit, 10**5, RngHandle(6, 0, "ratio"))
    assert rep.status == "inconclusive" and rep.max_abs_log_ratio is None


def test_ratio_audit_preconditions():
    series, edit = adversarial_pair()
    cfg = DetectorConfig.private(laplace_k5()[:2], 1.0, 0.0)
    with pytest.raises(PreconditionError, match="n_runs"):
        empirical_privacy_ratio(cfg, series, edit, 1000, RngHandle(0, 0, "r"))
    long = MultiStreamSeries((np.zeros(6), np.zeros(6)))
    with pytest.raises(PreconditionError, match="tiny"):
        empirical_privacy_ratio(cfg, long, edit, 10**5, RngHandle(0, 0, "r"))
    cfg3 = DetectorConfig.private(laplace_k5()[:3], 1.0, 0.0)
    wide = MultiStreamSeries((np.zeros(3),) * 3)
    with pytest.raises(PreconditionError, match="tiny"):
        empirical_privacy_ratio(cfg3, wide, edit, 10**5, RngHandle(0, 0, "r"))
