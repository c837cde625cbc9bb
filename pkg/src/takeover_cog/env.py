"""Straight multi-lane highway with a work zone blocking the leftmost lane.

Lane 0 is the leftmost lane, lane centres sit at ``y = lane * lane_width`` and
``y`` grows to the right. Decisions run at 10 Hz, physics at 50 Hz; the
integration itself lives in :mod:`takeover_cog._kernels`.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields
from enum import Enum

import numpy as np
import yaml

from . import core
from ._kernels import kernel
from ._kernels import layout as K
from .core import NEUTRAL, Action, Frame, VehicleState, derive_rng

STREAM_SCENARIO = 0

IDM_S0 = 2.0
IDM_A = 1.5
IDM_B = 2.0
IDM_DELTA = 4.0
IDM_MAX_DECEL = 8.0
WHEELBASE_HALF = 1.35

TLT_LEVELS = (4.0, 6.0, 8.0, 10.0)


class ConfigError(ValueError):
    pass


class StateError(RuntimeError):
    pass


class Termination(str, Enum):
    RUNNING = "running"
    SUCCESS = "success"
    CRASH = "crash"
    OFF_ROAD = "off_road"


_STATUS = {K.RUNNING: Termination.RUNNING, K.SUCCESS: Termination.SUCCESS,
           K.CRASH: Termination.CRASH, K.OFF_ROAD: Termination.OFF_ROAD}


@dataclass(frozen=True)
class ScenarioConfig:
    """Work-zone takeover scenario.

    ``tlt``, ``tor_id`` and ``ndrt_id`` are carried as metadata only. The
    physical limits (``max_steer``, ``max_accel``, ``max_decel``, ``drag``)
    are declared defaults.
    """

    lane_count: int = 4
    lane_width: float = 3.5
    ego_speed0: float = 27.78
    background_speed: float = 22.22
    th_level: float = 2.0
    workzone_x: float = 500.0
    workzone_length: float = 80.0
    takeover_x: float = 310.0
    tlt: float = 6.0
    tor_id: int = 1
    ndrt_id: int = 1
    seed: int = 0
    traffic: bool = True
    headway_jitter: float = 0.2
    traffic_behind: float = 100.0
    traffic_ahead: float = 250.0
    success_margin: float = 50.0
    max_steer: float = 0.5
    max_accel: float = 3.0
    max_decel: float = 8.0
    drag: float = 0.0

    def __post_init__(self):
        if self.lane_count < 1:
            raise ConfigError("need at least one lane")
        if not self.lane_width > 0:
            raise ConfigError("lane_width must be positive")
        if not self.th_level > 0:
            raise ConfigError("th_level must be positive")
        if not self.takeover_x < self.workzone_x:
            raise ConfigError(
                f"takeover_x={self.takeover_x} must lie before workzone_x={self.workzone_x}")
        if not self.workzone_length > 0:
            raise ConfigError("workzone_length must be positive")
        if self.ego_speed0 < 0 or self.background_speed <= 0:
            raise ConfigError("speeds must be non-negative (background positive)")
        if not 0 <= self.headway_jitter < self.th_level:
            raise ConfigError("headway_jitter must lie in [0, th_level)")
        if self.tlt not in TLT_LEVELS:
            raise ConfigError(f"tlt must be one of {TLT_LEVELS}, got {self.tlt}")
        if not 1 <= self.tor_id <= 8:
            raise ConfigError(f"tor_id must be in 1..8, got {self.tor_id}")
        if not 1 <= self.ndrt_id <= 4:
            raise ConfigError(f"ndrt_id must be in 1..4, got {self.ndrt_id}")
        if self.traffic:
            min_spacing = (self.th_level - self.headway_jitter) * self.background_speed
            if min_spacing <= core.VEHICLE_LENGTH + IDM_S0:
                raise ConfigError(
                    f"headway {self.th_level}s leaves {min_spacing:.2f} m spacing, "
                    f"below vehicle length + {IDM_S0} m")

    @property
    def workzone_end(self) -> float:
        return self.workzone_x + self.workzone_length

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ScenarioConfig":
        known = {f.name: f for f in fields(cls)}
        unknown = set(data) - set(known)
        if unknown:
            raise ConfigError(f"unknown scenario keys: {sorted(unknown)}")
        kw = {}
        for k, v in data.items():
            default = known[k].default
            try:
                kw[k] = type(default)(v)
            except (TypeError, ValueError):
                raise ConfigError(f"bad value for {k}: {v!r}") from None
        return cls(**kw)


def load_config(path) -> ScenarioConfig:
    with open(path, encoding="utf-8") as fh:
        data = yaml.safe_load(fh) or {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a key/value mapping")
    return ScenarioConfig.from_dict(data)


def dump_config(config: ScenarioConfig) -> str:
    return yaml.safe_dump(config.to_dict(), sort_keys=True)


def road_params(config: ScenarioConfig) -> np.ndarray:
    road = np.zeros(K.ROAD_LEN)
    road[K.DT_SUB] = 0.02
    road[K.N_SUB] = 5
    road[K.LANE_W] = config.lane_width
    road[K.LANE_COUNT] = config.lane_count
    road[K.MAX_STEER] = config.max_steer
    road[K.MAX_ACCEL] = config.max_accel
    road[K.MAX_DECEL] = config.max_decel
    road[K.LF] = WHEELBASE_HALF
    road[K.LR] = WHEELBASE_HALF
    road[K.IDM_V0] = config.background_speed
    road[K.IDM_T] = config.th_level
    road[K.IDM_S0] = IDM_S0
    road[K.IDM_A] = IDM_A
    road[K.IDM_B] = IDM_B
    road[K.IDM_DELTA] = IDM_DELTA
    road[K.IDM_MAX_DECEL] = IDM_MAX_DECEL
    road[K.SUCCESS_X] = config.workzone_end + config.success_margin
    road[K.DRAG] = config.drag
    return road


def compute_leaders(veh: np.ndarray, lanes: np.ndarray) -> np.ndarray:
    """Row index of the nearest same-lane vehicle ahead (-1 if none); row 0 excluded."""
    leaders = np.full(len(veh), -1, dtype=np.int64)
    for lane in np.unique(lanes[1:]):
        rows = np.flatnonzero(lanes == lane)
        rows = rows[rows > 0]
        order = rows[np.argsort(veh[rows, K.X], kind="stable")]
        leaders[order[:-1]] = order[1:]
    return leaders


@dataclass(frozen=True)
class CollisionEvent:
    t: int
    partner_id: int  # -1 is the work zone
    x: float


@dataclass(eq=False)
class WorldState:
    """World at one decision step, stored as packed arrays.

    ``veh`` rows are ``(x, y, speed, heading, length, width)``; row 0 is the
    ego. ``ego`` and ``background`` expose the same data as value objects.
    """

    t: int
    veh: np.ndarray
    lanes: np.ndarray
    ids: np.ndarray
    leaders: np.ndarray
    workzone: np.ndarray  # (lane, x_start, x_end)
    config: ScenarioConfig
    road: np.ndarray = field(default=None)
    status: int = K.RUNNING
    partner: int = K.NO_PARTNER

    def __post_init__(self):
        if self.road is None:
            self.road = road_params(self.config)

    @property
    def n_vehicles(self) -> int:
        return len(self.veh) - 1

    @property
    def terminated(self) -> Termination:
        return _STATUS[self.status]

    @property
    def ego_lane(self) -> int:
        return lane_index(self.veh[0, K.Y], self.config)

    def _vehicle(self, row: int) -> VehicleState:
        x, y, v, h, length, width = (float(a) for a in self.veh[row])
        lane = self.ego_lane if row == 0 else int(self.lanes[row])
        return VehicleState(int(self.ids[row]), lane, x, y, v * math.cos(h), v * math.sin(h),
                            h, length, width)

    @property
    def ego(self) -> VehicleState:
        return self._vehicle(0)

    @property
    def background(self) -> list:
        return [self._vehicle(r) for r in range(1, len(self.veh))]

    def snapshot(self) -> "WorldState":
        return WorldState(self.t, self.veh.copy(), self.lanes.copy(), self.ids.copy(),
                          self.leaders.copy(), self.workzone.copy(), self.config,
                          self.road.copy(), self.status, self.partner)

    def __eq__(self, other):
        if not isinstance(other, WorldState):
            return NotImplemented
        return (self.t == other.t and self.status == other.status
                and self.partner == other.partner and self.config == other.config
                and np.array_equal(self.veh, other.veh)
                and np.array_equal(self.lanes, other.lanes)
                and np.array_equal(self.ids, other.ids)
                and np.array_equal(self.leaders, other.leaders)
                and np.array_equal(self.workzone, other.workzone)
                and np.array_equal(self.road, other.road))

    def to_frame(self, action: Action = NEUTRAL) -> Frame:
        return Frame(self.t, self.ego, tuple(self.background), action,
                     self.status == K.CRASH)


def lane_index(y: float, config: ScenarioConfig) -> int:
    lane = math.floor(y / config.lane_width + 0.5)
    return int(min(max(lane, 0), config.lane_count - 1))


def snapshot(world: WorldState) -> WorldState:
    return world.snapshot()


def _place_lane(rng, config: ScenarioConfig, lane: int) -> list:
    spacing = config.th_level * config.background_speed
    lo = config.takeover_x - config.traffic_behind
    hi = config.workzone_end + config.traffic_ahead
    x = lo + rng.uniform(0.0, spacing)
    out = []
    while x <= hi:
        out.append(x)
        jitter = rng.uniform(-config.headway_jitter, config.headway_jitter)
        x += (config.th_level + jitter) * config.background_speed
    if lane == 0:
        # the blocked lane only carries traffic behind the ego
        clear = config.takeover_x - core.VEHICLE_LENGTH - IDM_S0 - spacing / 2
        out = [v for v in out if v < clear]
    return out


def make_scenario(config: ScenarioConfig) -> WorldState:
    """Ego in the leftmost lane at ``takeover_x``; IDM traffic in every lane."""
    rows = [[config.takeover_x, 0.0, config.ego_speed0, 0.0,
             core.VEHICLE_LENGTH, core.VEHICLE_WIDTH]]
    lanes = [0]
    if config.traffic:
        rng = derive_rng(config.seed, STREAM_SCENARIO)
        for lane in range(config.lane_count):
            for x in _place_lane(rng, config, lane):
                rows.append([x, lane * config.lane_width, config.background_speed, 0.0,
                             core.VEHICLE_LENGTH, core.VEHICLE_WIDTH])
                lanes.append(lane)
    veh = np.array(rows, dtype=float)
    lanes = np.array(lanes, dtype=np.int64)
    ids = np.arange(len(veh), dtype=np.int64)
    wz = np.array([0.0, config.workzone_x, config.workzone_end])
    return WorldState(0, veh, lanes, ids, compute_leaders(veh, lanes), wz, config)


def step(world: WorldState, ego_action: Action) -> WorldState:
    """Advance one decision step; returns a new world."""
    if world.status != K.RUNNING:
        raise StateError(f"world already terminated ({world.terminated.value}) at t={world.t}")
    new = world.snapshot()
    status, partner = kernel.physics_step(new.veh, new.lanes, new.leaders, new.workzone,
                                          new.road, float(ego_action.steer),
                                          float(ego_action.longitudinal))
    new.t = world.t + 1
    new.status = int(status)
    new.partner = int(partner)
    return new


def boxes_overlap(a: VehicleState, b: VehicleState) -> bool:
    return bool(kernel.obb_overlap(a.x, a.y, a.heading, a.length, a.width,
                                   b.x, b.y, b.heading, b.length, b.width))


def workzone_box(world: WorldState) -> VehicleState:
    lane, xs, xe = world.workzone
    w = world.config.lane_width
    return VehicleState(-1, int(lane), 0.5 * (xs + xe), lane * w, 0.0, 0.0, 0.0, xe - xs, w)


def detect_collision(world: WorldState):
    """First overlap of the ego box with a vehicle or the work zone, else ``None``."""
    ego = world.ego
    for other in world.background:
        if boxes_overlap(ego, other):
            return CollisionEvent(world.t, other.id, ego.x)
    if boxes_overlap(ego, workzone_box(world)):
        return CollisionEvent(world.t, -1, ego.x)
    return None


def world_from_frame(frame: Frame, config: ScenarioConfig) -> WorldState:
    """Rebuild a world from an observed frame (speeds from velocity norms)."""
    vehicles = (frame.ego,) + tuple(frame.others)
    veh = np.array([[v.x, v.y, math.hypot(v.vx, v.vy), v.heading, v.length, v.width]
                    for v in vehicles], dtype=float)
    lanes = np.array([lane_index(frame.ego.y, config)] + [v.lane for v in frame.others],
                     dtype=np.int64)
    ids = np.array([v.id for v in vehicles], dtype=np.int64)
    wz = np.array([0.0, config.workzone_x, config.workzone_end])
    status = K.CRASH if frame.collision else K.RUNNING
    return WorldState(frame.t, veh, lanes, ids, compute_leaders(veh, lanes), wz, config,
                      status=status)
