import math

import numpy as np
import pytest

from takeover_cog import env, policy
from takeover_cog.core import (MAX_DELAY_STEPS, TRAJECTORY_HEADER, Action, CognitiveParams,
                               Frame, TrajectoryParseError, TrajectoryValidationError,
                               TrajectoryWindow, VehicleState, derive_rng, read_trajectory,
                               round_delay, trajectory_csv_text, write_trajectory)


def test_round_delay_halves_up_and_clamps():
    assert round_delay(2.5) == 3
    assert round_delay(2.49) == 2
    assert round_delay(0.0) == 0
    assert round_delay(19.6) == MAX_DELAY_STEPS
    assert round_delay(-3) == 0


@pytest.mark.parametrize("bad", [(0.5, 0.2, 1, 1), (-0.1, 1, 1, 1), (0.1, 6, 1, 1),
                                 (0.1, 1, 11, 1), (0.1, 1, 1, 21), (math.nan, 1, 1, 1)])
def test_cognitive_params_rejects_invalid(bad):
    with pytest.raises(ValueError):
        CognitiveParams(*bad)


def test_cognitive_params_roundtrip():
    p = CognitiveParams(0.2, 3.0, 4.0, 7.4)
    assert CognitiveParams.from_array(p.as_array()) == p
    assert p.d_steps == 7


def test_action_is_clipped():
    a = Action(2.0, -3.0)
    assert (a.steer, a.longitudinal) == (1.0, -1.0)


def test_derive_rng_streams_are_reproducible_and_distinct():
    a = derive_rng(7, 1).random(5)
    assert np.array_equal(a, derive_rng(7, 1).random(5))
    assert not np.array_equal(a, derive_rng(7, 2).random(5))
    assert not np.array_equal(a, derive_rng(8, 1).random(5))
    assert not np.array_equal(derive_rng(7, 1, 0).random(5), derive_rng(7, 1, 1).random(5))


def test_window_requires_contiguous_frames():
    ego = VehicleState(0, 0, 0.0, 0.0, 1.0, 0.0, 0.0)
    with pytest.raises(ValueError):
        TrajectoryWindow([Frame(0, ego), Frame(2, ego)])
    with pytest.raises(ValueError):
        TrajectoryWindow([])
    w = TrajectoryWindow([Frame(3, ego), Frame(4, ego)])
    assert w.L == 2 and w.ego_matrix().shape == (2, 4)


@pytest.fixture(scope="module")
def episode():
    w = env.make_scenario(env.ScenarioConfig(seed=3))
    return policy.run_episode(w, policy.theta_schedule(40, derive_rng(3, 5)), rng=derive_rng(3, 1))


def test_trajectory_roundtrip_is_exact(tmp_path, episode):
    p = tmp_path / "frames.csv"
    write_trajectory(episode.frames, p)
    back = read_trajectory(p)
    assert back == episode.frames
    assert trajectory_csv_text(back) == p.read_text()


def test_trajectory_bad_header(tmp_path):
    p = tmp_path / "f.csv"
    p.write_text("a,b\n")
    with pytest.raises(TrajectoryParseError, match="line 1"):
        read_trajectory(p)


def test_trajectory_bad_field_reports_line(tmp_path):
    p = tmp_path / "f.csv"
    p.write_text(",".join(TRAJECTORY_HEADER) + "\n0,0,0,x,0,0,0,0,0,0,0\n")
    with pytest.raises(TrajectoryParseError, match="line 2"):
        read_trajectory(p)


def test_trajectory_time_must_increase(tmp_path):
    row = "{t},0,0,1.0,0.0,1.0,0.0,0.0,0.0,0.0,0\n"
    p = tmp_path / "f.csv"
    p.write_text(",".join(TRAJECTORY_HEADER) + "\n" + row.format(t=1) + row.format(t=0))
    with pytest.raises(TrajectoryValidationError):
        read_trajectory(p)


def test_trajectory_needs_ego(tmp_path):
    p = tmp_path / "f.csv"
    p.write_text(",".join(TRAJECTORY_HEADER) + "\n0,3,1,1.0,3.5,1.0,0.0,0.0,,,0\n")
    with pytest.raises(TrajectoryValidationError, match="no ego"):
        read_trajectory(p)
