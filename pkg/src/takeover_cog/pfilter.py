"""Windowed particle filter over the cognitive parameters.

Each particle carries a θ hypothesis, a log-weight and its own controller
memory (range beliefs, delay history, lane intent), which is advanced on the
observed anchor frame every step so that window rollouts start from the
particle's own internal state.
"""
from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from . import env
from ._kernels import kernel
from ._kernels import layout as K
from .core import THETA_BOUNDS, THETA_NAMES, CognitiveParams, TrajectoryWindow, derive_rng
from .policy import (CALIBRATED_GAINS, DEFAULT_CONTROL, ControllerConfig, ControllerGains,
                     PolicyState)

log = logging.getLogger(__name__)

TRACE_HEADER = ("t", "mean_sigma0", "mean_sigmax", "mean_c", "mean_d", "var_sigma0",
                "var_sigmax", "var_c", "var_d", "ess", "resampled")

NOISE_SEEDED = "seeded"
NOISE_EXPECTED = "expected"


class FilterError(RuntimeError):
    pass


@dataclass(frozen=True)
class FilterConfig:
    N: int = 20
    L: int = 5
    Q: tuple = (0.05, 0.25, 0.5, 1.0)
    Sigma: tuple = (1.0, 0.5, 1.0, 0.5)
    ess_threshold_fraction: float = 0.5
    bounds: tuple = tuple(map(tuple, THETA_BOUNDS))
    noise_mode: str = NOISE_SEEDED

    def __post_init__(self):
        object.__setattr__(self, "Q", tuple(float(q) for q in self.Q))
        object.__setattr__(self, "Sigma", tuple(float(s) for s in self.Sigma))
        object.__setattr__(self, "bounds", tuple(tuple(float(v) for v in b) for b in self.bounds))
        if self.N < 2:
            raise ValueError("N must be at least 2")
        if self.L < 1:
            raise ValueError("L must be at least 1")
        if len(self.Q) != 4 or any(q < 0 for q in self.Q):
            raise ValueError("Q must be four non-negative stddevs")
        if len(self.Sigma) != 4 or any(not s > 0 for s in self.Sigma):
            raise ValueError("Sigma must be four positive stddevs")
        if not 0 < self.ess_threshold_fraction <= 1:
            raise ValueError("ess_threshold_fraction must lie in (0, 1]")
        if self.noise_mode not in (NOISE_SEEDED, NOISE_EXPECTED):
            raise ValueError(f"unknown noise_mode {self.noise_mode!r}")

    @property
    def bounds_array(self) -> np.ndarray:
        return np.array(self.bounds, dtype=float)


@dataclass(frozen=True)
class Particle:
    theta: CognitiveParams
    log_weight: float


@dataclass
class ParticleSet:
    """Structure-of-arrays particle storage.

    ``thetas`` is (N, 4); ``stream_ids`` address each particle's rollout
    noise. ``tracks``/``history``/``meta`` hold per-particle controller
    memory once a world is attached (``None`` before).
    """

    thetas: np.ndarray
    log_weights: np.ndarray
    stream_ids: np.ndarray
    tracks: np.ndarray = None
    history: np.ndarray = None
    meta: np.ndarray = None

    def __len__(self):
        return len(self.thetas)

    @property
    def weights(self) -> np.ndarray:
        return np.exp(self.log_weights - logsumexp(self.log_weights))

    def particles(self) -> list:
        return [Particle(CognitiveParams.from_array(t), float(w))
                for t, w in zip(self.thetas, self.log_weights)]

    def copy(self) -> "ParticleSet":
        cp = lambda a: None if a is None else a.copy()  # noqa: E731
        return ParticleSet(self.thetas.copy(), self.log_weights.copy(), self.stream_ids.copy(),
                           cp(self.tracks), cp(self.history), cp(self.meta))

    def attach(self, n_targets: int) -> None:
        """Fresh controller memory for every particle."""
        n = len(self)
        self.tracks = np.zeros((n, n_targets, K.TRACK_COLS))
        self.history = np.zeros((n, K.HIST_LEN, 2))
        self.meta = np.tile(np.array([K.HIST_LEN - 1, 0, -1], dtype=np.int64), (n, 1))

    def take(self, idx) -> "ParticleSet":
        idx = np.asarray(idx)
        pick = lambda a: None if a is None else np.ascontiguousarray(a[idx])  # noqa: E731
        n = len(idx)
        return ParticleSet(self.thetas[idx].copy(), np.full(n, -math.log(n)),
                           self.stream_ids[idx].copy(), pick(self.tracks), pick(self.history),
                           pick(self.meta))


def _project(thetas: np.ndarray, bounds: np.ndarray) -> np.ndarray:
    np.clip(thetas, bounds[:, 0], bounds[:, 1], out=thetas)
    np.minimum(thetas[:, 0], thetas[:, 1], out=thetas[:, 0])
    return thetas


def init_particles(config: FilterConfig, rng) -> ParticleSet:
    """Latin-hypercube draw over the bounds with σ0 ≤ σmax enforced.

    Violating pairs are repaired first by swapping σ0 values between
    particles, then by redrawing inside the violating particle's own strata,
    so every dimension keeps exactly one sample per stratum.
    """
    N = config.N
    b = config.bounds_array
    lo, width = b[:, 0], b[:, 1] - b[:, 0]
    strata = np.empty((N, 4), dtype=np.int64)
    u = np.empty((N, 4))
    for k in range(4):
        strata[:, k] = rng.permutation(N)
        u[:, k] = (strata[:, k] + rng.random(N)) / N
    th = lo + width * u

    def bad():
        return np.flatnonzero(th[:, 0] > th[:, 1])

    for i in bad():
        if th[i, 0] <= th[i, 1]:
            continue
        ok = np.flatnonzero((th[:, 0] <= th[i, 1]) & (th[i, 0] <= th[:, 1]))
        ok = ok[ok != i]
        if len(ok):
            j = ok[rng.integers(len(ok))]
            th[[i, j], 0] = th[[j, i], 0]
            strata[[i, j], 0] = strata[[j, i], 0]
    for i in bad():
        s0_lo = lo[0] + width[0] * strata[i, 0] / N
        sm_lo = lo[1] + width[1] * strata[i, 1] / N
        sm_hi = lo[1] + width[1] * (strata[i, 1] + 1) / N
        if th[i, 0] < sm_hi:
            th[i, 1] = rng.uniform(max(th[i, 0], sm_lo), sm_hi)
        elif s0_lo <= th[i, 1]:
            th[i, 0] = rng.uniform(s0_lo, th[i, 1])
        else:
            log.debug("LHS repair fell back to projection for particle %d", i)
            th[i, 0] = th[i, 1]
    _project(th, b)
    return ParticleSet(th, np.full(N, -math.log(N)), np.arange(N, dtype=np.int64))


def propagate(particles: ParticleSet, Q, rng, bounds=THETA_BOUNDS) -> ParticleSet:
    """Gaussian random walk, then clamp to bounds and project σ0 := min(σ0, σmax)."""
    Q = np.asarray(Q, dtype=float)
    out = particles.copy()
    xi = rng.standard_normal(out.thetas.shape)
    out.thetas += xi * Q
    _project(out.thetas, np.asarray(bounds, dtype=float))
    return out


def window_noise(rng, n_targets: int, L: int) -> np.ndarray:
    """(L, n_targets) perception noise drawn target-major.

    Target-major order means appending a target never changes the draws of
    the existing ones.
    """
    return np.ascontiguousarray(rng.standard_normal((n_targets, L)).T)


def _check_window(anchor, window: TrajectoryWindow):
    if anchor.status != K.RUNNING:
        raise FilterError(f"anchor at t={anchor.t} is already terminated")
    if window.frames[0].t != anchor.t + 1:
        raise FilterError(
            f"window starts at t={window.frames[0].t}, expected anchor t+1={anchor.t + 1}")


def window_loglik(anchor, observed: TrajectoryWindow, theta: CognitiveParams,
                  gains: ControllerGains, Sigma, rng, policy_state: PolicyState = None,
                  control: ControllerConfig = DEFAULT_CONTROL,
                  noise_mode: str = NOISE_SEEDED) -> float:
    """Σ_s log N(y_s; ŷ_s, diag(Σ²)) over the ego (x, y, vx, vy) of the window.

    The rollout starts from ``anchor`` (one step before the first observed
    frame) with ``policy_state`` as the controller memory (fresh when
    omitted; never mutated). Steps after an early termination are scored
    against the frozen terminal state.
    """
    _check_window(anchor, observed)
    n1 = len(anchor.veh)
    L = observed.L
    z = window_noise(rng, n1, L)
    if noise_mode == NOISE_EXPECTED:
        z[:] = 0.0
    ps = policy_state.copy() if policy_state is not None else PolicyState.fresh(n1)
    out = np.zeros(1)
    kernel.window_batch(anchor.veh, anchor.lanes, anchor.leaders, anchor.workzone, anchor.road,
                        control.as_array(), gains.as_array(), theta.as_array()[None, :],
                        z[None], ps.tracks[None], ps.history[None], ps.meta[None],
                        np.ascontiguousarray(observed.ego_matrix()),
                        np.asarray(Sigma, dtype=float), out)
    return float(out[0])


def reweight(particles: ParticleSet, logliks, L: int) -> ParticleSet:
    """log w += loglik / L, then normalise (geometric-mean window likelihood)."""
    ll = np.asarray(logliks, dtype=float)
    if ll.shape != (len(particles),):
        raise FilterError(f"expected {len(particles)} log-likelihoods, got shape {ll.shape}")
    nan = np.flatnonzero(np.isnan(ll))
    if len(nan):
        raise FilterError(f"NaN log-likelihood for particle {int(nan[0])}")
    out = particles.copy()
    lw = out.log_weights + ll / L
    if np.all(np.isneginf(lw)):
        log.warning("all particle likelihoods are zero; resetting to uniform weights")
        lw = np.zeros(len(lw))
    out.log_weights = lw - logsumexp(lw)
    return out


def ess(weights) -> float:
    w = np.asarray(weights, dtype=float)
    return float(1.0 / np.sum(w * w))


def systematic_indices(weights, rng) -> np.ndarray:
    """Offspring parent indices from one uniform offset and strided CDF inversion."""
    w = np.asarray(weights, dtype=float)
    N = len(w)
    cdf = np.cumsum(w)
    cdf[-1] = 1.0
    pos = (rng.random() + np.arange(N)) / N
    return np.minimum(np.searchsorted(cdf, pos, side="right"), N - 1)


def systematic_resample(particles: ParticleSet, rng) -> ParticleSet:
    return particles.take(systematic_indices(particles.weights, rng))


@dataclass(frozen=True)
class PosteriorSummary:
    t: int
    mean: CognitiveParams
    variance: np.ndarray
    ess: float = float("nan")
    resampled: bool = False

    @property
    def d_rounded(self) -> int:
        return self.mean.d_steps

    def row(self) -> list:
        m = self.mean.as_array()
        return [self.t, *m, *self.variance, self.ess, int(self.resampled)]


def posterior_summary(particles: ParticleSet, t: int = -1, ess_value=None,
                      resampled: bool = False) -> PosteriorSummary:
    w = particles.weights
    mean = w @ particles.thetas
    var = w @ (particles.thetas - mean) ** 2
    mean[0] = min(mean[0], mean[1])
    mean = np.clip(mean, THETA_BOUNDS[:, 0], THETA_BOUNDS[:, 1])
    return PosteriorSummary(t, CognitiveParams.from_array(mean), var,
                            ess(w) if ess_value is None else ess_value, resampled)


@dataclass
class FilterState:
    config: FilterConfig
    particles: ParticleSet
    noise_seed: int
    gains: ControllerGains = CALIBRATED_GAINS
    control: ControllerConfig = DEFAULT_CONTROL
    last_anchor: int = None


def init_filter(config: FilterConfig, rng, gains: ControllerGains = None,
                control: ControllerConfig = DEFAULT_CONTROL) -> FilterState:
    particles = init_particles(config, rng)
    seed = int(rng.integers(2**63 - 1))
    return FilterState(config, particles, seed, gains or CALIBRATED_GAINS, control)


def batch_logliks(state: FilterState, anchor, window: TrajectoryWindow,
                  particles: ParticleSet) -> np.ndarray:
    """Window log-likelihood of every particle; advances their memory by the anchor step."""
    cfg = state.config
    n1 = len(anchor.veh)
    if particles.tracks is None:
        particles.attach(n1)
    if particles.tracks.shape[1] != n1:
        raise FilterError(f"world has {n1} targets, particles track {particles.tracks.shape[1]}")
    N, L = len(particles), window.L
    z = np.zeros((N, L, n1))
    if cfg.noise_mode == NOISE_SEEDED:
        for i, sid in enumerate(particles.stream_ids):
            z[i] = window_noise(derive_rng(state.noise_seed, anchor.t, int(sid)), n1, L)
    out = np.zeros(N)
    kernel.window_batch(anchor.veh, anchor.lanes, anchor.leaders, anchor.workzone, anchor.road,
                        state.control.as_array(), state.gains.as_array(),
                        np.ascontiguousarray(particles.thetas), z, particles.tracks,
                        particles.history, particles.meta,
                        np.ascontiguousarray(window.ego_matrix()),
                        np.asarray(cfg.Sigma, dtype=float), out)
    return out


def pf_step(state: FilterState, anchor, window: TrajectoryWindow, rng) -> tuple:
    """propagate -> window likelihoods -> reweight -> resample if ESS is low -> summary.

    The state is updated in place and also returned.
    """
    cfg = state.config
    if window.L != cfg.L:
        raise FilterError(f"window has {window.L} frames, filter expects L={cfg.L}")
    _check_window(anchor, window)
    if state.last_anchor is not None and anchor.t != state.last_anchor + 1:
        raise FilterError(
            f"windows must roll by one step: anchor {anchor.t} after {state.last_anchor}")
    moved = propagate(state.particles, cfg.Q, rng, cfg.bounds_array)
    ll = batch_logliks(state, anchor, window, moved)
    weighted = reweight(moved, ll, cfg.L)
    e = ess(weighted.weights)
    resampled = e < cfg.N * cfg.ess_threshold_fraction
    summary = posterior_summary(weighted, anchor.t, e, resampled)
    state.particles = systematic_resample(weighted, rng) if resampled else weighted
    state.last_anchor = anchor.t
    return summary, state


def run_filter(frames, scenario: env.ScenarioConfig, config: FilterConfig, rng,
               gains: ControllerGains = None, control: ControllerConfig = DEFAULT_CONTROL,
               callback=None) -> list:
    """Filter a whole episode; one summary per window (anchor t = 0, 1, ...)."""
    state = init_filter(config, rng, gains, control)
    out = []
    for k in range(config.L, len(frames)):
        anchor = env.world_from_frame(frames[k - config.L], scenario)
        if anchor.status != K.RUNNING:
            break
        window = TrajectoryWindow(frames[k - config.L + 1:k + 1])
        summary, state = pf_step(state, anchor, window, rng)
        out.append(summary)
        if callback is not None:
            callback(k, summary, state)
    return out


def trace_csv_text(summaries) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRACE_HEADER)
    for s in summaries:
        w.writerow([v if isinstance(v, (int, np.integer)) else repr(float(v)) for v in s.row()])
    return buf.getvalue()


def read_trace(path) -> list:
    """Posterior trace CSV -> list of dicts with float fields."""
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [{k: (int(v) if k in ("t", "resampled") else float(v)) for k, v in r.items()}
            for r in rows]


__all__ = ["FilterConfig", "Particle", "ParticleSet", "FilterState", "PosteriorSummary",
           "FilterError", "init_particles", "propagate", "window_loglik", "reweight", "ess",
           "systematic_resample", "systematic_indices", "posterior_summary", "pf_step",
           "init_filter", "run_filter", "trace_csv_text", "read_trace", "THETA_NAMES"]
