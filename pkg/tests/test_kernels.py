import os
import subprocess
import sys

import numpy as np
import pytest

from takeover_cog import env, policy
from takeover_cog._kernels import BACKEND, _pykernel, available_backends, layout
from takeover_cog.core import derive_rng

BACKENDS = available_backends()
needs_c = pytest.mark.skipif("cython" not in BACKENDS, reason="compiled backend not built")


@needs_c
def test_layout_matches_compiled_constants():
    assert BACKENDS["cython"].LAYOUT == layout.LAYOUT


def test_layout_constants_are_consistent():
    assert layout.CTRL_LEN == len(policy.DEFAULT_CONTROL.as_array())
    assert layout.GAINS_LEN == len(policy.CALIBRATED_GAINS.as_array())
    assert layout.HIST_LEN == 21 and layout.META_LEN == 3
    assert layout.LAYOUT["SETTLE_TOL"] == layout.SETTLE_TOL


def test_fallback_selected_by_environment():
    code = "from takeover_cog._kernels import BACKEND; print(BACKEND)"
    out = subprocess.run([sys.executable, "-c", code], capture_output=True, text=True,
                         env={**os.environ, "TC_KERNEL": "python"}, check=True)
    assert out.stdout.strip() == "python"
    assert BACKEND in BACKENDS


def _rollout(k, seed, steps=150):
    w = env.make_scenario(env.ScenarioConfig(seed=seed))
    n1 = len(w.veh)
    rng = derive_rng(seed, 4)
    th = policy.theta_schedule(steps, rng)
    z = rng.standard_normal((steps, n1))
    st = policy.PolicyState.fresh(n1)
    S = np.zeros((steps, n1, 4))
    A = np.zeros((steps, 2))
    res = k.rollout(w.veh, w.lanes, w.leaders, w.workzone, w.road,
                    policy.DEFAULT_CONTROL.as_array(), policy.CALIBRATED_GAINS.as_array(),
                    th, z, st.tracks, st.history, st.meta, np.zeros(2), False, S, A)
    return tuple(int(v) for v in res), S, A, st.tracks, st.meta


@needs_c
@pytest.mark.parametrize("seed", [0, 1, 2, 3])
def test_rollout_bit_identical_across_backends(seed):
    a = _rollout(_pykernel, seed)
    b = _rollout(BACKENDS["cython"], seed)
    assert a[0] == b[0]
    for x, y in zip(a[1:], b[1:]):
        assert np.array_equal(x, y)


@needs_c
def test_window_batch_bit_identical_across_backends():
    w = env.make_scenario(env.ScenarioConfig(seed=5))
    n1, L, N = len(w.veh), 5, 6
    ep = policy.run_episode(w, policy.theta_schedule(L + 1, derive_rng(5, 5)),
                            rng=derive_rng(5, 1))
    obs = np.array([[f.ego.x, f.ego.y, f.ego.vx, f.ego.vy] for f in ep.frames[1:L + 1]])
    rng = derive_rng(5, 6)
    thetas = np.array([policy.sample_prior(rng) for _ in range(N)])
    z = rng.standard_normal((N, L, n1))
    outs = []
    for k in (_pykernel, BACKENDS["cython"]):
        tr = np.zeros((N, n1, layout.TRACK_COLS))
        hist = np.zeros((N, layout.HIST_LEN, 2))
        meta = np.tile(np.array([layout.HIST_LEN - 1, 0, -1], dtype=np.int64), (N, 1))
        ll = np.zeros(N)
        k.window_batch(w.veh, w.lanes, w.leaders, w.workzone, w.road,
                       policy.DEFAULT_CONTROL.as_array(), policy.CALIBRATED_GAINS.as_array(),
                       thetas, z, tr, hist, meta, obs, np.array([1.0, 0.5, 1.0, 0.5]), ll)
        outs.append((ll, tr, hist, meta))
    for x, y in zip(*outs):
        assert np.array_equal(x, y)


@needs_c
def test_obb_overlap_agrees():
    rng = np.random.default_rng(3)
    c = BACKENDS["cython"]
    for _ in range(500):
        args = (rng.uniform(-5, 5), rng.uniform(-3, 3), rng.uniform(-1, 1), 4.5, 1.8,
                rng.uniform(-5, 5), rng.uniform(-3, 3), rng.uniform(-1, 1), 4.5, 1.8)
        assert bool(_pykernel.obb_overlap(*args)) == bool(c.obb_overlap(*args))


def test_delay_steps_rounding():
    assert [_pykernel.delay_steps(d) for d in (0.0, 0.49, 0.5, 2.5, 19.7, 25.0)] == \
        [0, 0, 1, 3, 20, 20]
