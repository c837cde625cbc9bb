import math

import numpy as np
import pytest

from takeover_cog import env, pfilter, policy, predict
from takeover_cog.core import CognitiveParams, derive_rng


def test_rmse_identical_is_zero():
    a = np.random.default_rng(0).normal(size=(12, 4))
    assert predict.rmse_series(a, a.copy()) == (0.0, 0.0, 0.0)


def test_rmse_constant_offsets():
    r = np.zeros((10, 4))
    p = r + np.array([3.0, 4.0, 1.0, 0.0])
    pos, vel, wgt = predict.rmse_series(p, r)
    assert (pos, vel) == (pytest.approx(5.0, abs=1e-12), pytest.approx(1.0, abs=1e-12))
    assert wgt == pytest.approx(math.sqrt(13.0), abs=1e-12)
    assert predict.rmse_series(p, r, alpha=1.0, beta=0.0)[2] == pytest.approx(5.0, abs=1e-12)


def test_rmse_growing_error_and_horizon():
    r = np.zeros((4, 4))
    p = np.zeros((4, 4))
    p[:, 0] = [1.0, 2.0, 3.0, 4.0]
    assert predict.rmse_series(p, r)[0] == pytest.approx(math.sqrt(7.5), abs=1e-12)
    assert predict.rmse_series(p, r, H=2)[0] == pytest.approx(math.sqrt(2.5), abs=1e-12)


def test_rmse_errors():
    with pytest.raises(ValueError):
        predict.rmse_series(np.zeros((3, 4)), np.zeros((4, 4)))
    with pytest.raises(ValueError):
        predict.rmse_series(np.zeros((3, 4)), np.zeros((3, 4)), alpha=0.7, beta=0.7)
    with pytest.raises(ValueError):
        predict.rmse_series(np.zeros((0, 4)), np.zeros((0, 4)))
    with pytest.raises(ValueError):
        predict.rmse_series(np.zeros((3, 4)), np.zeros((3, 4)), H=5)


def test_record_validation():
    with pytest.raises(ValueError):
        predict.PredictionRecord(5, 0, np.zeros((0, 4)))
    with pytest.raises(ValueError):
        predict.PredictionRecord(5, 3, np.zeros((3, 4)), True, 9)
    predict.PredictionRecord(5, 3, np.zeros((3, 4)), True, 8)


def _straight_world(x=None):
    w = env.make_scenario(env.ScenarioConfig(lane_count=1, traffic=False))
    if x is not None:
        w.veh[0, 0] = x
    return w


def test_cv_flags_work_zone_at_kinematic_time():
    w = _straight_world(460.0)
    rec = predict.rollout_cv(w, 30)
    gap = 500.0 - (460.0 + 2.25)
    expect = math.ceil(gap / (w.veh[0, 2] * 0.1) - 1e-9)
    assert rec.collision_flag and rec.partner == -1
    assert rec.flag_step == expect
    assert len(rec.predicted) == expect
    far = predict.rollout_cv(_straight_world(), 30)
    assert not far.collision_flag and far.predicted.shape == (30, 4)


def test_adaptive_rollout_deterministic_and_flags():
    w = _straight_world(440.0)
    th = CognitiveParams(0.0, 0.0, 0.0, 0.0)
    a = predict.rollout_adaptive(w, th, policy.CALIBRATED_GAINS, 30, derive_rng(0, 3))
    b = predict.rollout_adaptive(w, th, policy.CALIBRATED_GAINS, 30, derive_rng(0, 3))
    assert np.array_equal(a.predicted, b.predicted)
    assert a.collision_flag and a.partner == -1
    assert w.t < a.flag_step <= w.t + 30


def _evaluation(t_col, t_flag):
    ev = predict.EpisodeEvaluation("cv")
    ev.t_col, ev.t_flag = t_col, t_flag
    return ev


def test_coverage_and_false_flags():
    evs = [_evaluation(50, 45), _evaluation(50, 40), _evaluation(50, None), _evaluation(None, 3),
           _evaluation(None, None)]
    cov = predict.lead_time_coverage(evs, (0.5, 1.0, 2.0))
    assert cov == {0.5: pytest.approx(2 / 3), 1.0: pytest.approx(1 / 3), 2.0: 0.0}
    assert predict.false_flag_rate(evs) == 0.5
    assert predict.lead_time_coverage([], (1.0,)) == {1.0: 0.0}
    # exactly one threshold ahead counts as a hit
    assert predict.early_warning_hit(_evaluation(30, 20), 1.0)
    assert evs[0].lead_s == 0.5


@pytest.fixture(scope="module")
def crash_episode():
    for seed in range(1000, 1100):
        cfg = env.ScenarioConfig(seed=seed)
        ep = policy.run_episode(env.make_scenario(cfg),
                                policy.theta_schedule(200, derive_rng(seed, 5)),
                                rng=derive_rng(seed, 1))
        if ep.frames[-1].collision and len(ep.frames) > 25:
            return cfg, ep
    raise AssertionError("no collision episode found")


@pytest.mark.parametrize("method", predict.METHODS)
def test_rolling_evaluate_basics(crash_episode, method):
    cfg, ep = crash_episode
    fc = pfilter.FilterConfig(N=12)
    ev = predict.rolling_evaluate(ep.frames, method, fc, policy.CALIBRATED_GAINS, 20,
                                  derive_rng(0, 9), cfg)
    assert ev.t_col == ep.frames[-1].t
    assert [r.k for r in ev.records] == list(range(5, len(ep.frames) - 1))
    assert len(ev.rmse_pos) == len(ev.records)
    if ev.t_flag is not None:
        assert ev.records[ev.t_flag - 5].collision_flag
    if method == "adaptive":
        assert len(ev.thetas) == len(ev.records)


@pytest.mark.parametrize("method", ["adaptive", "cognition_off"])
def test_rolling_evaluate_uses_no_future_frames(crash_episode, method):
    cfg, ep = crash_episode
    fc = pfilter.FilterConfig(N=12)
    full = predict.rolling_evaluate(ep.frames, method, fc, policy.CALIBRATED_GAINS, 20,
                                    derive_rng(4, 9), cfg)
    cut = predict.rolling_evaluate(ep.frames[:18], method, fc, policy.CALIBRATED_GAINS, 20,
                                   derive_rng(4, 9), cfg)
    for a, b in zip(cut.records, full.records):
        assert a.k == b.k and np.array_equal(a.predicted, b.predicted)
        assert a.collision_flag == b.collision_flag


def test_rolling_evaluate_rejects_bad_input(crash_episode):
    cfg, ep = crash_episode
    with pytest.raises(ValueError):
        predict.rolling_evaluate(ep.frames, "oracle", pfilter.FilterConfig(), None, 10,
                                 derive_rng(0, 0), cfg)
    with pytest.raises(ValueError):
        predict.rolling_evaluate(ep.frames[:4], "cv", pfilter.FilterConfig(), None, 10,
                                 derive_rng(0, 0), cfg)


def test_report_csv_layout(crash_episode):
    cfg, ep = crash_episode
    ev = predict.rolling_evaluate(ep.frames, "cv", pfilter.FilterConfig(), None, 20,
                                  derive_rng(0, 9), cfg)
    text = predict.report_csv_text([predict.report_rows("e0", ev, (0.5, 1, 2, 3))],
                                   (0.5, 1, 2, 3))
    header, row = text.strip().split("\n")
    assert header == ("episode,method,t_col,t_flag,lead_s,hit_0.5,hit_1,hit_2,hit_3,"
                      "mean_rmse_pos,mean_rmse_vel")
    assert row.startswith("e0,cv,")
