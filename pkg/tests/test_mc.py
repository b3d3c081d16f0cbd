import json
import math

import numpy as np
import pytest

from dpcusum import mc
from dpcusum.data import generate
from dpcusum.engine import DetectorConfig, run
from dpcusum.errors import PreconditionError
from dpcusum.mc import ChangeScenario, CurvePoint, EstimateReport, TrialPlan
from dpcusum.model import Gaussian, StreamModel
from dpcusum.noise import RngHandle
from dpcusum.presets import gauss_k5_trunc, laplace_k5

LAP5 = laplace_k5()
GAU5 = gauss_k5_trunc()


def test_plan_validation():
    with pytest.raises(PreconditionError):
        TrialPlan(0, 10, 1)
    with pytest.raises(PreconditionError):
        TrialPlan(5, 0, 1)


def test_immediate_alarm_edge():
    cfg = DetectorConfig.nonprivate(LAP5, -1.0)
    rep = mc.estimate_arl(cfg, TrialPlan(50, 100, 1))
    assert rep.mean == 1.0 and rep.stderr == 0.0 and rep.censored_fraction == 0.0
    assert rep.valid


def test_censoring_is_reported_not_raised():
    cfg = DetectorConfig.nonprivate(LAP5, 50.0)
    rep = mc.estimate_arl(cfg, TrialPlan(20, 30, 1))
    assert rep.censored_fraction == 1.0 and rep.mean == 30.0
    assert not rep.valid


def test_trials_replay_through_the_engine():
    """Trial i of the fast path equals engine.run on data regenerated from its seed."""
    cfg = DetectorConfig.private(LAP5, 0.4, 8.0, horizon=20_000)
    plan = TrialPlan(12, 20_000, 99)
    batch = mc._TrialBatch(cfg, ChangeScenario.no_change(), 99, range(12), "arl")
    batch.advance(20_000)
    for i in range(12):
        series = generate(ChangeScenario.no_change(), int(batch.t[i]), RngHandle(99, i, "arl:data"), LAP5)
        cfg_i = DetectorConfig.private(LAP5, 0.4, 8.0, horizon=series.T)
        out = run(cfg_i, series.rows(), RngHandle(99, i, "arl:noise"))
        assert out.alarm == bool(batch.alarmed[i])
        assert out.stop_time == batch.t[i]
    rep = mc.estimate_arl(cfg, plan)
    assert rep.mean == pytest.approx(batch.t.mean())


def test_delay_replay_with_change():
    scen = ChangeScenario.immediate({0, 2})
    cfg = DetectorConfig.private(GAU5, 1.0, 6.0, horizon=5000)
    batch = mc._TrialBatch(cfg, scen, 5, range(6), "delay")
    batch.advance(5000)
    for i in range(6):
        series = generate(scen, int(batch.t[i]), RngHandle(5, i, "delay:data"), GAU5)
        cfg_i = DetectorConfig.private(GAU5, 1.0, 6.0, horizon=series.T)
        assert run(cfg_i, series.rows(), RngHandle(5, i, "delay:noise")).stop_time == batch.t[i]


def test_worker_count_does_not_change_reports():
    cfg = DetectorConfig.private(LAP5, 0.4, 6.0)
    plan = TrialPlan(300, 10**5, 17)
    one = mc.estimate_arl(cfg, plan, jobs=1)
    three = mc.estimate_arl(cfg, plan, jobs=3)
    assert json.dumps(one.to_dict()) == json.dumps(three.to_dict())
    scen = ChangeScenario.immediate(range(5))
    assert mc.estimate_delay(cfg, plan, scen, 1) == mc.estimate_delay(cfg, plan, scen, 2)


def test_early_exit_certifies_target():
    cfg = DetectorConfig.nonprivate(LAP5, 10.0)
    rep = mc.estimate_arl(cfg, TrialPlan(400, 10**6, 3), cap=300.0)
    assert rep.status == "capped" and rep.lcl99 >= 300.0
    assert rep.reached < 10**6 and not rep.valid
    full = mc.estimate_arl(cfg, TrialPlan(400, 10**6, 3))
    assert full.mean >= rep.mean


def test_delay_requires_immediate_change():
    cfg = DetectorConfig.nonprivate(LAP5, 5.0)
    with pytest.raises(PreconditionError, match="unsupported scenario"):
        mc.estimate_delay(cfg, TrialPlan(5, 100, 1), ChangeScenario(10, frozenset({0})))
    with pytest.raises(PreconditionError, match="unsupported scenario"):
        mc.estimate_delay(cfg, TrialPlan(5, 100, 1), ChangeScenario.no_change())
    with pytest.raises(PreconditionError):
        ChangeScenario(0, frozenset())
    with pytest.raises(PreconditionError, match="out of range"):
        mc.estimate_delay(cfg, TrialPlan(5, 100, 1), ChangeScenario.immediate({7}))


def test_common_random_numbers_make_arl_monotone():
    cfg = DetectorConfig.private(LAP5, 0.4, 2.0)
    plan = TrialPlan(200, 10**5, 8)
    prev = None
    for b in (2.0, 4.0, 6.0, 8.0):
        times, alarmed, _, _ = mc._simulate(cfg.with_threshold(b), ChangeScenario.no_change(), plan, "arl")
        if prev is not None:
            assert (times >= prev).all()
        prev = times


def test_delay_doubles_roughly_with_threshold():
    cfg = DetectorConfig.nonprivate(GAU5, 20.0)
    plan = TrialPlan(2000, 10**5, 2)
    scen = ChangeScenario.immediate(range(5))
    d1 = mc.estimate_delay(cfg, plan, scen).mean
    d2 = mc.estimate_delay(cfg.with_threshold(40.0), plan, scen).mean
    assert 1.6 <= d2 / d1 <= 2.4


def test_sweep_single_point_and_ordering_checks():
    cfg = DetectorConfig.nonprivate(LAP5, 3.0)
    plan = TrialPlan(100, 10**4, 1)
    scen = ChangeScenario.immediate(range(5))
    pts = mc.sweep_curve(cfg, [3.0], plan, scen)
    assert len(pts) == 1 and pts[0].threshold == 3.0
    assert pts[0].arl.lane == "arl" and pts[0].delay.lane == "delay"
    assert pts[0].arl.config["master_seed"] == pts[0].delay.config["master_seed"]
    with pytest.raises(PreconditionError):
        mc.sweep_curve(cfg, [], plan, scen)
    with pytest.raises(PreconditionError):
        mc.sweep_curve(cfg, [3.0, 3.0], plan, scen)


def test_sweep_skips_after_stop_level():
    cfg = DetectorConfig.nonprivate(LAP5, 3.0)
    pts = mc.sweep_curve(cfg, [2.0, 4.0, 6.0], TrialPlan(200, 10**5, 1), ChangeScenario.immediate(range(5)), arl_stop=30.0)
    assert [p.arl.status for p in pts] == ["ok", "ok", "skipped"]
    assert pts[2].arl.mean == pts[1].arl.mean
    assert pts[2].delay.mean > pts[1].delay.mean


def _point(b, arl, delay, status="ok", se=1.0):
    rep = lambda m, lane, s: EstimateReport(m, se, 0.0, 100, 10**6, 10**6, lane, s)
    return CurvePoint(b, rep(arl, "arl", status), rep(delay, "delay", "ok"))


def test_delay_at_arl_interpolates_in_log_arl():
    pts = [_point(1, 100.0, 10.0), _point(2, 1000.0, 20.0), _point(3, 10000.0, 40.0)]
    d, se, exact = mc.delay_at_arl(pts, math.sqrt(100.0 * 1000.0))
    assert d == pytest.approx(15.0) and exact
    slope = 10.0 / math.log(10.0)
    assert se == pytest.approx(math.sqrt(0.5 + (0.5 * slope / 100) ** 2 + (0.5 * slope / 1000) ** 2))
    assert mc.delay_at_arl(pts, 3000.0)[0] == pytest.approx(20.0 + 20.0 * math.log(3) / math.log(10))
    assert mc.delay_at_arl(pts, 50.0) is None
    assert mc.delay_at_arl(pts, 2e4) is None


def test_delay_at_arl_error_includes_arl_uncertainty():
    def interp(a0, a1, d0=10.0, d1=30.0):
        pts = [CurvePoint(1, EstimateReport(a0, 0.0, 0, 1, 1, 1, "arl"), EstimateReport(d0, 0.0, 0, 1, 1, 1, "delay")),
               CurvePoint(2, EstimateReport(a1, 0.0, 0, 1, 1, 1, "arl"), EstimateReport(d1, 0.0, 0, 1, 1, 1, "delay"))]
        return mc.delay_at_arl(pts, 300.0)[0]

    a0, a1, s0, s1 = 100.0, 2000.0, 15.0, 40.0
    h = 1e-6
    g0 = (interp(a0 * (1 + h), a1) - interp(a0 * (1 - h), a1)) / (2 * h)
    g1 = (interp(a0, a1 * (1 + h)) - interp(a0, a1 * (1 - h))) / (2 * h)
    pts = [_point(1, a0, 10.0, se=s0), _point(2, a1, 30.0, se=s1)]
    pts = [CurvePoint(p.threshold, p.arl, EstimateReport(p.delay.mean, 0.0, 0, 1, 1, 1, "delay")) for p in pts]
    _, se, _ = mc.delay_at_arl(pts, 300.0)
    assert se == pytest.approx(math.hypot(g0 * s0 / a0, g1 * s1 / a1), rel=1e-6)


def test_delay_at_arl_capped_endpoint_gives_upper_bound():
    capped = [_point(1, 100.0, 10.0), _point(2, 1000.0, 20.0, status="capped"), _point(3, 1000.0, 40.0, status="skipped")]
    assert mc.delay_at_arl(capped, 500.0) is None
    d, _, exact = mc.delay_at_arl(capped, 500.0, upper_ok=True)
    assert not exact
    # the true ARL at b=2 is at least 1000, so the true interpolant is at most d
    truth = [_point(1, 100.0, 10.0), _point(2, 2000.0, 20.0)]
    assert mc.delay_at_arl(truth, 500.0)[0] <= d
    # nothing beyond the first capped point is used
    assert mc.delay_at_arl(capped, 1000.0 + 1, upper_ok=True) is None


def test_geometric_grid():
    g = mc.geometric_grid(4, 40, 8)
    assert len(g) == 8 and g[0] == pytest.approx(4) and g[-1] == pytest.approx(40)
    assert np.allclose(np.diff(np.log(g)), math.log(10) / 7)
    assert mc.geometric_grid(5, 50, 1) == [5.0]
    with pytest.raises(PreconditionError):
        mc.geometric_grid(5, 50, 0)


def test_calibration_sanity_model():
    m = [StreamModel(Gaussian(0, 1), Gaussian(1, 1), trunc_level=12.0)]
    cfg = DetectorConfig.nonprivate(m, 1.0)
    for seed in (1, 2):
        cal = mc.calibrate_threshold(cfg, 200.0, TrialPlan(2000, 10**5, seed))
        assert cal.converged
        assert abs(cal.report.mean - 200.0) <= 20.0
        assert len(cal.probes) <= 20


def test_calibration_rejects_gamma_one():
    with pytest.raises(PreconditionError):
        mc.calibrate_threshold(DetectorConfig.nonprivate(LAP5, 1.0), 1.0, TrialPlan(10, 10, 1))


def test_curve_csv(tmp_path):
    pts = [_point(1.5, 100.0, 10.0), _point(2.5, 900.0, 12.0)]
    path = tmp_path / "c.csv"
    mc.write_curve_csv(pts, path)
    lines = path.read_text().splitlines()
    assert lines[0] == "b,arl_mean,arl_stderr,delay_mean,delay_stderr,arl_censored_frac"
    assert lines[1].split(",")[0] == "1.5" and len(lines) == 3


def test_curve_point_round_trip():
    p = _point(2.5, 900.0, 12.0, status="capped")
    q = mc.CurvePoint.from_dict(json.loads(json.dumps(p.to_dict())))
    assert q == p


@pytest.mark.parametrize("tau", [0, 3, math.inf])
def test_stacked_score_block_equals_per_trial(tau):
    from dpcusum.scenario import score_block
    models = gauss_k5_trunc()
    sc = ChangeScenario(tau, frozenset({1, 2})) if tau != math.inf else ChangeScenario.no_change()
    u = RngHandle(1, 0, "u").uniforms(4 * 6 * 5).reshape(4, 6, 5)
    stacked = score_block(models, sc, u, 1)
    assert stacked.shape == (4, 6, 5)
    for j in range(4):
        assert np.array_equal(stacked[j], score_block(models, sc, u[j], 1))
