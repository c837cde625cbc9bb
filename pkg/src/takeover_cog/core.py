"""Shared domain types, RNG stream derivation and trajectory CSV I/O."""
from __future__ import annotations

import csv
import io
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

DT = 0.1  # decision step, seconds
MAX_DELAY_STEPS = 20

# (low, high) per cognitive dimension: sigma0, sigma_max, c, d
THETA_BOUNDS = np.array([[0.0, 1.0], [0.0, 5.0], [0.0, 10.0], [0.0, 20.0]])
THETA_NAMES = ("sigma0", "sigma_max", "c", "d")

VEHICLE_LENGTH = 4.5
VEHICLE_WIDTH = 1.8

TRAJECTORY_HEADER = ("t", "agent_id", "lane", "x", "y", "vx", "vy", "heading",
                     "steer", "long", "collision")


class TrajectoryError(ValueError):
    """Base class for trajectory file problems."""


class TrajectoryParseError(TrajectoryError):
    pass


class TrajectoryValidationError(TrajectoryError):
    pass


def round_delay(d: float) -> int:
    """Nearest integer delay, halves rounded up, clamped to the valid range."""
    return int(min(max(math.floor(d + 0.5), 0), MAX_DELAY_STEPS))


@dataclass(frozen=True)
class CognitiveParams:
    """Latent bounded-rationality state.

    ``d`` is kept continuous so the filter's random walk has a continuous
    support; it is rounded only where the delay is applied.
    """

    sigma0: float = 0.0
    sigma_max: float = 0.0
    c: float = 0.0
    d: float = 0.0

    def __post_init__(self):
        vals = self.as_array()
        if not np.all(np.isfinite(vals)):
            raise ValueError(f"non-finite cognitive parameters: {vals}")
        lo, hi = THETA_BOUNDS[:, 0], THETA_BOUNDS[:, 1]
        if np.any(vals < lo) or np.any(vals > hi):
            raise ValueError(f"cognitive parameters out of bounds: {vals}")
        if self.sigma0 > self.sigma_max:
            raise ValueError(
                f"sigma0={self.sigma0} exceeds sigma_max={self.sigma_max}")

    @property
    def d_steps(self) -> int:
        return round_delay(self.d)

    def as_array(self) -> np.ndarray:
        return np.array([self.sigma0, self.sigma_max, self.c, self.d], dtype=float)

    @classmethod
    def from_array(cls, arr) -> "CognitiveParams":
        a = [float(v) for v in arr]
        return cls(*a)


@dataclass(frozen=True)
class VehicleState:
    id: int
    lane: int
    x: float
    y: float
    vx: float
    vy: float
    heading: float
    length: float = VEHICLE_LENGTH
    width: float = VEHICLE_WIDTH

    @property
    def speed(self) -> float:
        return math.hypot(self.vx, self.vy)


@dataclass(frozen=True)
class Action:
    """Normalised control; positive ``longitudinal`` is throttle, negative brake."""

    steer: float = 0.0
    longitudinal: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "steer", min(max(float(self.steer), -1.0), 1.0))
        object.__setattr__(self, "longitudinal",
                           min(max(float(self.longitudinal), -1.0), 1.0))


NEUTRAL = Action(0.0, 0.0)


@dataclass(frozen=True)
class Frame:
    t: int
    ego: VehicleState
    others: tuple = ()
    action: Action = NEUTRAL
    collision: bool = False


@dataclass(frozen=True)
class TrajectoryWindow:
    frames: tuple
    L: int = field(init=False)

    def __post_init__(self):
        frames = tuple(self.frames)
        object.__setattr__(self, "frames", frames)
        object.__setattr__(self, "L", len(frames))
        if not frames:
            raise ValueError("a trajectory window needs at least one frame")
        for a, b in zip(frames, frames[1:]):
            if b.t != a.t + 1:
                raise ValueError(f"window frames not contiguous at t={a.t}->{b.t}")

    def ego_matrix(self) -> np.ndarray:
        """Observed ego (x, y, vx, vy) per frame, shape (L, 4)."""
        return np.array([[f.ego.x, f.ego.y, f.ego.vx, f.ego.vy] for f in self.frames])


def derive_rng(seed: int, stream_id: int, *substreams: int) -> np.random.Generator:
    """Independent, reproducible generator for ``(seed, stream_id, *substreams)``.

    Extra keys address nested streams, e.g. ``(seed, step, particle)``.
    """
    key = (int(stream_id),) + tuple(int(s) for s in substreams)
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=key)
    return np.random.Generator(np.random.PCG64(ss))


def _fmt(v: float) -> str:
    return repr(float(v))


def trajectory_csv_text(frames) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRAJECTORY_HEADER)
    for f in frames:
        col = "1" if f.collision else "0"
        e = f.ego
        w.writerow([f.t, e.id, e.lane, _fmt(e.x), _fmt(e.y), _fmt(e.vx), _fmt(e.vy),
                    _fmt(e.heading), _fmt(f.action.steer), _fmt(f.action.longitudinal), col])
        for o in f.others:
            w.writerow([f.t, o.id, o.lane, _fmt(o.x), _fmt(o.y), _fmt(o.vx), _fmt(o.vy),
                        _fmt(o.heading), "", "", col])
    return buf.getvalue()


def atomic_write_text(path, text: str) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)


def write_trajectory(frames, path) -> None:
    """Write frames as trajectory CSV. Agent id 0 is the ego."""
    atomic_write_text(path, trajectory_csv_text(frames))


def read_trajectory(path) -> list:
    """Parse a trajectory CSV into frames; the ego row carries the action."""
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise TrajectoryParseError(f"{path}: line 1: missing header")
    if tuple(rows[0]) != TRAJECTORY_HEADER:
        raise TrajectoryParseError(f"{path}: line 1: unexpected header {rows[0]}")

    grouped: dict = {}
    order = []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(TRAJECTORY_HEADER):
            raise TrajectoryParseError(
                f"{path}: line {lineno}: expected {len(TRAJECTORY_HEADER)} fields, got {len(row)}")
        try:
            t = int(row[0])
            agent = int(row[1])
            lane = int(row[2])
            x, y, vx, vy, heading = (float(v) for v in row[3:8])
            collision = bool(int(row[10]))
            steer = float(row[8]) if row[8] != "" else None
            lon = float(row[9]) if row[9] != "" else None
        except ValueError as exc:
            raise TrajectoryParseError(f"{path}: line {lineno}: {exc}") from None
        veh = VehicleState(agent, lane, x, y, vx, vy, heading)
        if t in grouped and t != order[-1]:
            raise TrajectoryValidationError(
                f"{path}: line {lineno}: t={t} reappears after t={order[-1]}")
        if t not in grouped:
            if order and t < order[-1]:
                raise TrajectoryValidationError(
                    f"{path}: line {lineno}: t={t} does not increase after t={order[-1]}")
            grouped[t] = {"ego": None, "others": [], "action": NEUTRAL,
                          "collision": collision, "line": lineno}
            order.append(t)
        g = grouped[t]
        if agent == 0:
            g["ego"] = veh
            if steer is not None and lon is not None:
                g["action"] = Action(steer, lon)
        else:
            g["others"].append(veh)

    frames = []
    for t in order:
        g = grouped[t]
        if g["ego"] is None:
            raise TrajectoryValidationError(f"{path}: t={t} has no ego row (agent_id 0)")
        frames.append(Frame(t, g["ego"], tuple(g["others"]), g["action"], g["collision"]))
    return frames
