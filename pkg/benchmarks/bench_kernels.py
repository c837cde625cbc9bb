"""Compare the compiled and pure-Python kernel backends.

Times full closed-loop rollouts and single controller steps on the default
scenario, checks that both backends produce identical trajectories, and
prints one line per (operation, backend).

    python3 benchmarks/bench_kernels.py [--repeat 5] [--steps 200]
"""
import argparse
import time

import numpy as np

from takeover_cog import env, policy
from takeover_cog._kernels import available_backends
from takeover_cog.core import derive_rng


def _inputs(seed: int, steps: int):
    world = env.make_scenario(env.ScenarioConfig(seed=seed))
    rng = derive_rng(seed, 4)
    thetas = policy.theta_schedule(steps, rng)
    z = rng.standard_normal((steps, len(world.veh)))
    return world, thetas, z


def run_rollout(k, world, thetas, z):
    w = world.snapshot()
    n1 = len(w.veh)
    st = policy.PolicyState.fresh(n1)
    states = np.zeros((len(thetas), n1, 4))
    acts = np.zeros((len(thetas), 2))
    k.rollout(w.veh, w.lanes, w.leaders, w.workzone, w.road, policy.DEFAULT_CONTROL.as_array(),
              policy.CALIBRATED_GAINS.as_array(), thetas, z, st.tracks, st.history, st.meta,
              np.zeros(2), False, states, acts)
    return states, acts


def run_steps(k, world, thetas, z):
    n1 = len(world.veh)
    st = policy.PolicyState.fresh(n1)
    c, g = policy.DEFAULT_CONTROL.as_array(), policy.CALIBRATED_GAINS.as_array()
    out = np.zeros(2)
    for s in range(len(thetas)):
        k.policy_step(world.veh, world.lanes, world.workzone, world.road, c, g, thetas[s], z[s],
                      st.tracks, st.history, st.meta, out)
    return st.tracks


def _best(fn, repeat: int) -> float:
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=5)
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--seeds", type=int, default=3)
    args = p.parse_args(argv)

    backends = available_backends()
    if "cython" not in backends:
        print("compiled backend not built; timing the Python fallback only")
    cases = [_inputs(s, args.steps) for s in range(args.seeds)]

    ref = None
    for name, k in backends.items():
        outs = [run_rollout(k, *c) for c in cases]
        if ref is None:
            ref = outs
        else:
            same = all(np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])
                       for a, b in zip(ref, outs))
            print(f"{name}: trajectories identical to python: {same}")

    timings = {}
    for name, k in backends.items():
        timings[name] = {
            "rollout": _best(lambda: [run_rollout(k, *c) for c in cases], args.repeat),
            "policy_step": _best(lambda: [run_steps(k, *c) for c in cases], args.repeat),
        }
    n = args.seeds * args.steps
    for op in ("rollout", "policy_step"):
        for name, t in timings.items():
            speedup = timings["python"][op] / t[op]
            print(f"{op:12s} {name:7s} {1e6 * t[op] / n:10.2f} us/step  x{speedup:6.1f}")


if __name__ == "__main__":
    main()
