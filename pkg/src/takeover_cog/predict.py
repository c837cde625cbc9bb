"""Rolling-horizon collision prediction and its evaluation metrics."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from . import env
from ._kernels import kernel
from ._kernels import layout as K
from .core import DT, CognitiveParams, TrajectoryWindow, derive_rng
from .pfilter import FilterConfig, init_filter, pf_step, posterior_summary
from .policy import (CALIBRATED_GAINS, DEFAULT_CONTROL, ControllerConfig, ControllerGains,
                     PolicyState, cognition_off)

METHODS = ("adaptive", "cv", "cognition_off")
DEFAULT_THRESHOLDS = (0.5, 1.0, 2.0)

STREAM_PREDICT = 3


@dataclass(frozen=True)
class PredictionRecord:
    """One rollout issued at step ``k``; ``predicted`` rows are ego (x, y, vx, vy)."""

    k: int
    H: int
    predicted: np.ndarray = field(repr=False)
    collision_flag: bool = False
    flag_step: int = None
    flag_x: float = None
    partner: int = None

    def __post_init__(self):
        if self.H < 1:
            raise ValueError("H must be at least 1")
        if self.flag_step is not None and not self.k < self.flag_step <= self.k + self.H:
            raise ValueError(f"flag step {self.flag_step} outside ({self.k}, {self.k + self.H}]")


def _ego_rows(states: np.ndarray) -> np.ndarray:
    v, h = states[:, 2], states[:, 3]
    return np.column_stack([states[:, 0], states[:, 1], v * np.cos(h), v * np.sin(h)])


def rollout_adaptive(anchor, theta_hat: CognitiveParams, gains: ControllerGains, H: int, rng,
                     policy_state: PolicyState = None,
                     control: ControllerConfig = DEFAULT_CONTROL) -> PredictionRecord:
    """Closed-loop rollout of the controller under θ̂ for ``H`` steps.

    ``policy_state`` (copied, never mutated) is the controller memory at the
    anchor; a fresh one is used when omitted.
    """
    gains = gains or CALIBRATED_GAINS
    n1 = len(anchor.veh)
    ps = policy_state.copy() if policy_state is not None else PolicyState.fresh(n1)
    w = anchor.snapshot()
    thetas = np.tile(theta_hat.as_array(), (H, 1))
    z = rng.standard_normal((H, n1))
    states = np.zeros((H, 1, 4))
    acts = np.zeros((H, 2))
    done, status, partner = kernel.rollout(
        w.veh, w.lanes, w.leaders, w.workzone, w.road, control.as_array(), gains.as_array(),
        thetas, z, ps.tracks, ps.history, ps.meta, np.zeros(2), False, states, acts)
    pred = _ego_rows(states[:done, 0])
    if status == K.CRASH:
        return PredictionRecord(anchor.t, H, pred, True, anchor.t + done, float(pred[-1, 0]),
                                int(partner))
    return PredictionRecord(anchor.t, H, pred)


def rollout_cv(anchor, H: int) -> PredictionRecord:
    """Every vehicle keeps its current speed and heading; flag on first box overlap."""
    veh = anchor.veh
    ego = veh[0]
    ex, ey, ev, eh, el, ew = (float(a) for a in ego)
    evx, evy = ev * math.cos(eh), ev * math.sin(eh)
    others = veh[1:]
    ovx = others[:, K.V] * np.cos(others[:, K.H])
    ovy = others[:, K.V] * np.sin(others[:, K.H])
    wl, xs, xe = anchor.workzone
    lane_w = anchor.config.lane_width
    reach = 0.5 * (others[:, K.LEN] + el) + 0.5 * (others[:, K.WID] + ew)
    pred = np.zeros((H, 4))
    for h in range(1, H + 1):
        tau = h * DT
        x, y = ex + evx * tau, ey + evy * tau
        pred[h - 1] = (x, y, evx, evy)
        ox = others[:, K.X] + ovx * tau
        oy = others[:, K.Y] + ovy * tau
        near = np.flatnonzero(np.abs(ox - x) <= reach)
        for j in near:
            o = others[j]
            if kernel.obb_overlap(x, y, eh, el, ew, float(ox[j]), float(oy[j]), float(o[K.H]),
                                  float(o[K.LEN]), float(o[K.WID])):
                return PredictionRecord(anchor.t, H, pred[:h], True, anchor.t + h, x,
                                        int(anchor.ids[j + 1]))
        if kernel.obb_overlap(x, y, eh, el, ew, 0.5 * (xs + xe), wl * lane_w, 0.0, xe - xs,
                              lane_w):
            return PredictionRecord(anchor.t, H, pred[:h], True, anchor.t + h, x, -1)
    return PredictionRecord(anchor.t, H, pred)


def rmse_series(predicted, realized, H: int = None, alpha: float = 0.5,
                beta: float = 0.5) -> tuple:
    """(rmse_pos, rmse_vel, rmse_weighted) over the first ``H`` rows of (x, y, vx, vy)."""
    if alpha < 0 or beta < 0 or abs(alpha + beta - 1.0) > 1e-12:
        raise ValueError("alpha and beta must be non-negative and sum to 1")
    p = np.asarray(predicted, dtype=float)
    r = np.asarray(realized, dtype=float)
    if p.shape != r.shape:
        raise ValueError(f"length mismatch: predicted {p.shape} vs realized {r.shape}")
    if H is not None:
        if len(p) < H:
            raise ValueError(f"need {H} rows, got {len(p)}")
        p, r = p[:H], r[:H]
    if len(p) == 0:
        raise ValueError("empty series")
    dp = p[:, :2] - r[:, :2]
    dv = p[:, 2:4] - r[:, 2:4]
    pos = math.sqrt(float(np.mean(np.sum(dp * dp, axis=1))))
    vel = math.sqrt(float(np.mean(np.sum(dv * dv, axis=1))))
    return pos, vel, math.sqrt(alpha * pos * pos + beta * vel * vel)


@dataclass
class EpisodeEvaluation:
    method: str
    records: list = field(default_factory=list, repr=False)
    t_flag: int = None
    t_col: int = None
    rmse_pos: np.ndarray = field(default=None, repr=False)
    rmse_vel: np.ndarray = field(default=None, repr=False)
    rmse_weighted: np.ndarray = field(default=None, repr=False)
    thetas: list = field(default_factory=list, repr=False)

    @property
    def lead_s(self):
        if self.t_flag is None or self.t_col is None:
            return None
        return round((self.t_col - self.t_flag) * DT, 9)


def early_warning_hit(evaluation: EpisodeEvaluation, lead: float) -> bool:
    """True iff a flag precedes the ground-truth collision by at least ``lead`` seconds."""
    if evaluation.t_flag is None or evaluation.t_col is None:
        return False
    return (evaluation.t_col - evaluation.t_flag) * DT >= lead - 1e-9


def lead_time_coverage(evaluations, thresholds=DEFAULT_THRESHOLDS) -> dict:
    """Fraction of collision episodes warned at least τ seconds ahead, per τ."""
    col = [e for e in evaluations if e.t_col is not None]
    if not col:
        return {float(t): 0.0 for t in thresholds}
    return {float(t): sum(early_warning_hit(e, t) for e in col) / len(col) for t in thresholds}


def false_flag_rate(evaluations) -> float:
    free = [e for e in evaluations if e.t_col is None]
    if not free:
        return 0.0
    return sum(e.t_flag is not None for e in free) / len(free)


def _realized(frames, k: int, n: int) -> np.ndarray:
    rows = [[f.ego.x, f.ego.y, f.ego.vx, f.ego.vy] for f in frames[k + 1:k + 1 + n]]
    return np.array(rows, dtype=float).reshape(-1, 4)


def rolling_evaluate(frames, method: str, config: FilterConfig, gains: ControllerGains, H: int,
                     rng, scenario: env.ScenarioConfig,
                     control: ControllerConfig = DEFAULT_CONTROL, rollouts: int = 1,
                     alpha: float = 0.5, beta: float = 0.5) -> EpisodeEvaluation:
    """Issue one prediction per step ``k >= L`` using only frames up to ``k``.

    ``adaptive`` filters θ and rolls the controller out under the posterior
    mean; ``cognition_off`` rolls it out under θ = 0 without filtering; ``cv``
    extrapolates constant velocities. With ``rollouts > 1`` the model-based
    flag is a strict majority vote over independently seeded rollouts.
    """
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")
    gains = gains or CALIBRATED_GAINS
    L = config.L
    if len(frames) < L + 1:
        raise ValueError(f"episode needs at least L+1={L + 1} frames, got {len(frames)}")
    ev = EpisodeEvaluation(method)
    last = frames[-1]
    ev.t_col = last.t if last.collision else None

    n1 = 1 + len(frames[0].others)
    fstate = init_filter(config, rng, gains, control) if method == "adaptive" else None
    theta = (posterior_summary(fstate.particles).mean if fstate is not None
             else cognition_off())
    pstate = PolicyState.fresh(n1)
    noise_seed = int(rng.integers(2**63 - 1))

    def advance(world, th, j):
        z = derive_rng(noise_seed, STREAM_PREDICT, j, 0).standard_normal(n1)
        kernel.policy_step(world.veh, world.lanes, world.workzone, world.road,
                           control.as_array(), gains.as_array(), th.as_array(), z,
                           pstate.tracks, pstate.history, pstate.meta, np.zeros(2))

    worlds = {}

    def world(j):
        if j not in worlds:
            worlds[j] = env.world_from_frame(frames[j], scenario)
        return worlds[j]

    if method != "cv":
        for j in range(L):
            advance(world(j), theta, j)

    pos, vel, wgt = [], [], []
    for k in range(L, len(frames) - 1):
        wk = world(k)
        if wk.status != K.RUNNING:
            break
        if method == "adaptive":
            window = TrajectoryWindow(frames[k - L + 1:k + 1])
            summary, fstate = pf_step(fstate, world(k - L), window, rng)
            theta = summary.mean
            ev.thetas.append(summary)
        if method == "cv":
            rec = rollout_cv(wk, H)
        else:
            recs = [rollout_adaptive(wk, theta, gains, H,
                                     derive_rng(noise_seed, STREAM_PREDICT, k, m + 1),
                                     pstate, control) for m in range(rollouts)]
            votes = sum(r.collision_flag for r in recs)
            rec = recs[0]
            if rollouts > 1 and (votes * 2 > rollouts) != rec.collision_flag:
                rec = next(r for r in recs if r.collision_flag == (votes * 2 > rollouts))
            advance(wk, theta, k)
        ev.records.append(rec)
        if rec.collision_flag and ev.t_flag is None:
            ev.t_flag = k
        n = min(len(rec.predicted), len(frames) - 1 - k)
        if n > 0:
            p, v, w = rmse_series(rec.predicted[:n], _realized(frames, k, n), None, alpha, beta)
        else:
            p = v = w = float("nan")
        pos.append(p)
        vel.append(v)
        wgt.append(w)
    ev.rmse_pos, ev.rmse_vel, ev.rmse_weighted = np.array(pos), np.array(vel), np.array(wgt)
    return ev


def report_rows(episode: str, evaluation: EpisodeEvaluation,
                thresholds=DEFAULT_THRESHOLDS) -> list:
    lead = evaluation.lead_s
    hits = [int(early_warning_hit(evaluation, t)) for t in thresholds]

    def fmt(v):
        return "" if v is None else repr(float(v))

    def mean(a):
        a = a[np.isfinite(a)] if a is not None else np.array([])
        return repr(float(a.mean())) if len(a) else ""

    return [episode, evaluation.method, "" if evaluation.t_col is None else evaluation.t_col,
            "" if evaluation.t_flag is None else evaluation.t_flag, fmt(lead), *hits,
            mean(evaluation.rmse_pos), mean(evaluation.rmse_vel)]


def report_header(thresholds=DEFAULT_THRESHOLDS) -> tuple:
    hits = tuple(f"hit_{t:g}" for t in thresholds)
    return ("episode", "method", "t_col", "t_flag", "lead_s", *hits, "mean_rmse_pos",
            "mean_rmse_vel")


def report_csv_text(rows, thresholds=DEFAULT_THRESHOLDS) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(report_header(thresholds))
    w.writerows(rows)
    return buf.getvalue()
