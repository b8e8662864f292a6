"""Scene containers and agent-centric frame handling.

A scenario is a set of agent tracks plus road polylines on a shared time grid:
``H`` history steps, the current step, and ``T`` future steps, spaced ``dt``
apart.  Track states are stored as an ``(H+1+T, 9)`` float array with columns
``(t, x, y, heading, vx, vy, length, width, valid)``; invalid rows keep their
slot so indices always line up with the grid.

The world is 2-d.  Headings are radians in (-pi, pi], measured from +x.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np

from .errors import ValidationError

STATE_COLS = ("t", "x", "y", "heading", "vx", "vy", "length", "width", "valid")
T_COL, X_COL, Y_COL, H_COL, VX_COL, VY_COL, LEN_COL, WID_COL, VALID_COL = range(9)

OBJECT_TYPES = ("vehicle", "pedestrian", "cyclist", "other")

# road element vocabulary; index order defines the one-hot layout, "other"
# is the catch-all final slot for unknown types
ROAD_TYPES = (
    "lane_center",
    "road_edge",
    "road_line_solid",
    "road_line_broken",
    "crosswalk",
    "stop_line",
    "speed_bump",
    "driveway",
    "bike_lane",
    "median",
    "parking",
    "other",
)


def wrap_angle(h: float) -> float:
    """Wrap an angle to (-pi, pi]."""
    r = math.remainder(h, 2.0 * math.pi)
    if r <= -math.pi:
        r += 2.0 * math.pi
    return r


@dataclass(frozen=True)
class Polyline:
    type: str
    points: np.ndarray  # (n, 2)

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 2 or pts.shape[0] < 2:
            raise ValidationError(f"polyline needs shape (n>=2, 2), got {pts.shape}")
        pts.flags.writeable = False
        object.__setattr__(self, "points", pts)


@dataclass(frozen=True)
class AgentTrack:
    id: str
    object_type: str
    states: np.ndarray  # (n, 9), columns STATE_COLS

    def __post_init__(self):
        arr = np.asarray(self.states, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[1] != len(STATE_COLS):
            raise ValidationError(
                f"track {self.id!r}: states must be (n, {len(STATE_COLS)}), got {arr.shape}"
            )
        arr.flags.writeable = False
        object.__setattr__(self, "states", arr)

    @property
    def valid(self) -> np.ndarray:
        return self.states[:, VALID_COL] > 0.5

    @property
    def xy(self) -> np.ndarray:
        return self.states[:, X_COL : Y_COL + 1]


@dataclass(frozen=True)
class Scenario:
    tracks: tuple
    road: tuple
    av_id: str
    target_ids: tuple
    history_steps: int
    future_steps: int
    dt: float
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "tracks", tuple(self.tracks))
        object.__setattr__(self, "road", tuple(self.road))
        object.__setattr__(self, "target_ids", tuple(self.target_ids))

    @property
    def n_steps(self) -> int:
        return self.history_steps + 1 + self.future_steps

    @property
    def current_index(self) -> int:
        return self.history_steps

    def track(self, agent_id: str) -> AgentTrack:
        for t in self.tracks:
            if t.id == agent_id:
                return t
        raise KeyError(f"no track with id {agent_id!r}")


def validate_scenario(s: Scenario, where: str = "scenario"):
    """Check structural invariants; raises ValidationError naming the spot."""
    if s.dt <= 0:
        raise ValidationError(f"{where}: dt must be positive, got {s.dt}")
    if s.history_steps < 0 or s.future_steps < 1:
        raise ValidationError(
            f"{where}: need history_steps >= 0 and future_steps >= 1, "
            f"got {s.history_steps}/{s.future_steps}"
        )
    ids = [t.id for t in s.tracks]
    if len(set(ids)) != len(ids):
        raise ValidationError(f"{where}: duplicate track ids")
    grid = (np.arange(s.n_steps) - s.history_steps) * s.dt
    for t in s.tracks:
        if t.object_type not in OBJECT_TYPES:
            raise ValidationError(
                f"{where}: track {t.id!r} has unknown object_type {t.object_type!r}"
            )
        if t.states.shape[0] != s.n_steps:
            raise ValidationError(
                f"{where}: track {t.id!r} has {t.states.shape[0]} states, "
                f"expected {s.n_steps}"
            )
        if not np.allclose(t.states[:, T_COL], grid, atol=1e-9):
            raise ValidationError(f"{where}: track {t.id!r} timestamps off the scenario grid")
    if s.av_id not in ids:
        raise ValidationError(f"{where}: av_id {s.av_id!r} has no track")
    for tid in s.target_ids:
        if tid not in ids:
            raise ValidationError(f"{where}: target {tid!r} has no track")
        tr = s.track(tid)
        if tr.states[s.current_index, VALID_COL] <= 0.5:
            raise ValidationError(f"{where}: target {tid!r} has no valid state at t=0")
    for i, pl in enumerate(s.road):
        if pl.type not in ROAD_TYPES:
            raise ValidationError(f"{where}: road[{i}] has unknown type {pl.type!r}")


class Heading(NamedTuple):
    heading: float
    stationary: bool


def heading_from_displacement(points: np.ndarray, valid: np.ndarray | None = None,
                              eps: float = 1e-9) -> Heading:
    """Heading implied by the last displacement of a position sequence.

    Walks the valid positions backwards and returns the direction of the last
    pair further than ``eps`` apart; if every pair is coincident the sequence
    is flagged stationary with heading 0.
    """
    pts = np.asarray(points, dtype=np.float64)
    if valid is not None:
        pts = pts[np.asarray(valid, dtype=bool)]
    for i in range(pts.shape[0] - 1, 0, -1):
        d = pts[i] - pts[i - 1]
        if math.hypot(d[0], d[1]) > eps:
            return Heading(math.atan2(d[1], d[0]), False)
    return Heading(0.0, True)


@dataclass(frozen=True)
class Pose:
    """A planar pose; doubles as the world<->local frame transform."""

    x: float
    y: float
    heading: float

    def to_local_points(self, pts: np.ndarray) -> np.ndarray:
        pts = np.asarray(pts, dtype=np.float64)
        c, s = math.cos(self.heading), math.sin(self.heading)
        dx = pts[..., 0] - self.x
        dy = pts[..., 1] - self.y
        return np.stack([c * dx + s * dy, -s * dx + c * dy], axis=-1)

    def to_world_points(self, pts: np.ndarray) -> np.ndarray:
        pts = np.asarray(pts, dtype=np.float64)
        c, s = math.cos(self.heading), math.sin(self.heading)
        x = pts[..., 0]
        y = pts[..., 1]
        return np.stack([c * x - s * y + self.x, s * x + c * y + self.y], axis=-1)

    def to_local_vectors(self, v: np.ndarray) -> np.ndarray:
        v = np.asarray(v, dtype=np.float64)
        c, s = math.cos(self.heading), math.sin(self.heading)
        return np.stack([c * v[..., 0] + s * v[..., 1],
                         -s * v[..., 0] + c * v[..., 1]], axis=-1)

    def to_local_heading(self, h: float) -> float:
        return wrap_angle(h - self.heading)

    def to_world_heading(self, h: float) -> float:
        return wrap_angle(h + self.heading)


def current_pose(scenario: Scenario, agent_id: str) -> Pose:
    """Pose of an agent at the current step (t=0)."""
    tr = scenario.track(agent_id)
    row = tr.states[scenario.current_index]
    if row[VALID_COL] <= 0.5:
        raise ValidationError(f"agent {agent_id!r} has no valid state at t=0")
    return Pose(float(row[X_COL]), float(row[Y_COL]), float(row[H_COL]))


def _transform_track(track: AgentTrack, pose: Pose) -> AgentTrack:
    st = track.states.copy()
    xy = pose.to_local_points(st[:, X_COL : Y_COL + 1])
    vel = pose.to_local_vectors(st[:, VX_COL : VY_COL + 1])
    st[:, X_COL : Y_COL + 1] = xy
    st[:, VX_COL : VY_COL + 1] = vel
    st[:, H_COL] = [wrap_angle(h - pose.heading) for h in st[:, H_COL]]
    return AgentTrack(track.id, track.object_type, st)


def to_agent_frame(scenario: Scenario, agent_id: str) -> Scenario:
    """Re-express the whole scenario in the agent's current frame.

    The agent ends up at the origin heading along +x.  Positions, headings and
    velocities of every track are transformed; box extents, timestamps,
    validity and ids are untouched.  Applying the op with the origin pose is
    the identity (up to angle wrapping), and the transform is an isometry.
    """
    pose = current_pose(scenario, agent_id)
    tracks = tuple(_transform_track(t, pose) for t in scenario.tracks)
    road = tuple(Polyline(pl.type, pose.to_local_points(pl.points)) for pl in scenario.road)
    return replace(scenario, tracks=tracks, road=road)
