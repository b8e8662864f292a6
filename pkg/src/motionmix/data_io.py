"""Scenario files, synthetic scene generation, and dataset plumbing.

Scenarios interchange as JSON (human-inspectable fixtures beat binary at this
scale).  The synthetic generator builds multimodal scenes from four templates;
each scenario draws a latent maneuver, rolls a kinematically feasible future
along a piecewise line/arc path (turn radii well above the 3.5 m feasibility
floor), then perturbs waypoints with smoothed, speed-scaled Gaussian noise.
Raw white noise at useful sigmas would break the turning-radius checks, so the
noise is low-passed and a rejection loop re-draws it in the rare case a check
still trips.  Velocities and headings stay on the clean path: the noise models
perception jitter, not dynamics.

Dataset layout on disk: <root>/{train,val}/NNNNNN.json plus manifest.json.
Per-scenario seeds derive from a single SeedSequence, so generation is
deterministic and order-independent (safe to parallelize by index).
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass

import numpy as np

from .errors import ParseError, ValidationError
from .predictor import GaussianMixtureTrajectory
from .scene import (
    H_COL,
    LEN_COL,
    STATE_COLS,
    T_COL,
    VALID_COL,
    VX_COL,
    VY_COL,
    WID_COL,
    X_COL,
    Y_COL,
    AgentTrack,
    Polyline,
    Scenario,
    validate_scenario,
)

SCENARIO_FORMAT = "motionmix-scenario"
SCENARIO_VERSION = 1
DATASET_FORMAT = "motionmix-dataset"
PREDICTIONS_FORMAT = "motionmix-predictions"


# ---------------------------------------------------------------------------
# scenario JSON


def scenario_to_dict(s: Scenario) -> dict:
    return {
        "format": SCENARIO_FORMAT,
        "version": SCENARIO_VERSION,
        "dt": s.dt,
        "history_steps": s.history_steps,
        "future_steps": s.future_steps,
        "meta": dict(s.meta),
        "road": [{"type": p.type, "points": p.points.tolist()} for p in s.road],
        "agents": [
            {
                "id": t.id,
                "object_type": t.object_type,
                "av": t.id == s.av_id,
                "target": t.id in s.target_ids,
                "states": t.states.tolist(),
            }
            for t in s.tracks
        ],
    }


def _need(d: dict, key: str, where: str):
    if key not in d:
        raise ParseError(f"{where}: missing required key {key!r}")
    return d[key]


def scenario_from_dict(d: dict, where: str = "scenario") -> Scenario:
    if _need(d, "format", where) != SCENARIO_FORMAT:
        raise ParseError(f"{where}: not a {SCENARIO_FORMAT} document")
    if _need(d, "version", where) != SCENARIO_VERSION:
        raise ParseError(f"{where}: unsupported version {d['version']!r}")
    road = []
    for i, p in enumerate(_need(d, "road", where)):
        road.append(Polyline(_need(p, "type", f"{where}: road[{i}]"),
                             np.asarray(_need(p, "points", f"{where}: road[{i}]"))))
    tracks, av_ids, target_ids = [], [], []
    for i, a in enumerate(_need(d, "agents", where)):
        aw = f"{where}: agents[{i}]"
        tracks.append(AgentTrack(_need(a, "id", aw), _need(a, "object_type", aw),
                                 np.asarray(_need(a, "states", aw))))
        if a.get("av"):
            av_ids.append(tracks[-1].id)
        if a.get("target"):
            target_ids.append(tracks[-1].id)
    if len(av_ids) != 1:
        raise ParseError(f"{where}: exactly one agent must have av=true, got {len(av_ids)}")
    s = Scenario(
        tracks=tuple(tracks),
        road=tuple(road),
        av_id=av_ids[0],
        target_ids=tuple(target_ids),
        history_steps=int(_need(d, "history_steps", where)),
        future_steps=int(_need(d, "future_steps", where)),
        dt=float(_need(d, "dt", where)),
        meta=dict(d.get("meta", {})),
    )
    validate_scenario(s, where)
    return s


def save_scenario(s: Scenario, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(scenario_to_dict(s), fh, indent=1)
        fh.write("\n")


def load_scenario(path) -> Scenario:
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as e:
        raise ParseError(f"{path}: invalid JSON: {e}") from e
    if not isinstance(doc, dict):
        raise ParseError(f"{path}: expected a JSON object at top level")
    return scenario_from_dict(doc, where=str(path))


# ---------------------------------------------------------------------------
# piecewise line/arc paths


class PathBuilder:
    """Arc-length parameterized path of line and circular-arc segments."""

    def __init__(self, x: float = 0.0, y: float = 0.0, heading: float = 0.0):
        self._pos = np.array([x, y], dtype=float)
        self._heading = float(heading)
        self._segs = []  # (kind, length, payload)
        self.length = 0.0

    @property
    def end_heading(self) -> float:
        return self._heading

    def straight(self, length: float) -> "PathBuilder":
        if length <= 0:
            raise ValidationError("segment length must be positive")
        d = np.array([math.cos(self._heading), math.sin(self._heading)])
        self._segs.append(("line", length, (self._pos.copy(), d, self._heading)))
        self._pos = self._pos + d * length
        self.length += length
        return self

    def turn(self, radius: float, angle: float) -> "PathBuilder":
        """Constant-radius turn through a signed angle (positive = left)."""
        if radius <= 0 or angle == 0:
            raise ValidationError("turn needs radius > 0 and angle != 0")
        side = 1.0 if angle > 0 else -1.0
        center = self._pos + radius * np.array([
            math.cos(self._heading + side * math.pi / 2),
            math.sin(self._heading + side * math.pi / 2),
        ])
        a0 = self._heading - side * math.pi / 2
        length = radius * abs(angle)
        self._segs.append(("arc", length, (center, radius, a0, angle)))
        a1 = a0 + angle
        self._pos = center + radius * np.array([math.cos(a1), math.sin(a1)])
        self._heading = self._heading + angle
        self.length += length
        return self

    def sample(self, s: float):
        """(x, y, heading) at arc length s; clamps beyond either end."""
        s = min(max(s, 0.0), self.length)
        acc = 0.0
        for idx, (kind, length, payload) in enumerate(self._segs):
            if s <= acc + length + 1e-9 or idx == len(self._segs) - 1:
                u = min(max(s - acc, 0.0), length)
                if kind == "line":
                    p0, d, h = payload
                    pt = p0 + d * u
                    return float(pt[0]), float(pt[1]), h
                center, radius, a0, angle = payload
                a = a0 + angle * (u / length)
                side = 1.0 if angle > 0 else -1.0
                pt = center + radius * np.array([math.cos(a), math.sin(a)])
                return float(pt[0]), float(pt[1]), a + side * math.pi / 2
            acc += length
        raise ValidationError("path has no segments")

    def centerline(self, step: float = 2.0) -> np.ndarray:
        """Polyline approximation of the whole path for use as a road element."""
        n = max(2, int(math.ceil(self.length / step)) + 1)
        ss = np.linspace(0.0, self.length, n)
        return np.array([self.sample(s)[:2] for s in ss])


# ---------------------------------------------------------------------------
# synthetic scenes

TEMPLATES = ("t_junction", "four_way", "lane_follow", "parking_lot")

_DEFAULT_PROBS = {
    "t_junction": {"left": 0.5, "right": 0.5},
    "four_way": {"left": 0.3, "straight": 0.4, "right": 0.3},
    "lane_follow": {"cruise": 0.5, "brake": 0.25, "accelerate": 0.25},
    "parking_lot": {"stop": 0.25, "creep": 0.25, "pull_left": 0.25, "pull_right": 0.25},
}

VEHICLE_DIMS = (4.5, 2.0)


@dataclass
class SyntheticConfig:
    template: str = "t_junction"
    count: int = 100
    seed: int = 0
    noise_sigma: float = 0.05
    mode_probs: dict | None = None
    history_steps: int = 5
    future_steps: int = 40
    dt: float = 0.2
    max_neighbors: int = 4

    def resolved_probs(self) -> dict:
        if self.template not in TEMPLATES:
            raise ValidationError(f"unknown template {self.template!r}")
        probs = self.mode_probs or _DEFAULT_PROBS[self.template]
        extra = set(probs) - set(_DEFAULT_PROBS[self.template])
        if extra:
            raise ValidationError(
                f"maneuvers {sorted(extra)} not available in template {self.template!r}")
        total = sum(probs.values())
        if abs(total - 1.0) > 1e-9:
            raise ValidationError(f"mode probabilities sum to {total}, expected 1")
        if any(p < 0 for p in probs.values()):
            raise ValidationError("mode probabilities must be non-negative")
        return dict(probs)

    def to_dict(self) -> dict:
        return {
            "template": self.template, "count": self.count, "seed": self.seed,
            "noise_sigma": self.noise_sigma, "mode_probs": self.mode_probs,
            "history_steps": self.history_steps, "future_steps": self.future_steps,
            "dt": self.dt, "max_neighbors": self.max_neighbors,
        }


def _speed_profile(v0: float, accel: float, n: int, dt: float, lo=0.0, hi=15.0):
    """Clipped linear speed profile and its cumulative arc length on the grid."""
    t = np.arange(n) * dt
    v = np.clip(v0 + accel * t, lo, hi)
    s = np.zeros(n)
    s[1:] = np.cumsum(0.5 * (v[1:] + v[:-1]) * dt)
    return v, s


def _track_from_path(path: PathBuilder, s_grid, v_grid, t_grid, dims):
    """States (n, 9) sampled along a path; heading/velocity from the clean path."""
    n = len(s_grid)
    states = np.zeros((n, len(STATE_COLS)))
    for i in range(n):
        x, y, h = path.sample(float(s_grid[i]))
        states[i, T_COL] = t_grid[i]
        states[i, X_COL] = x
        states[i, Y_COL] = y
        states[i, H_COL] = h
        states[i, VX_COL] = v_grid[i] * math.cos(h)
        states[i, VY_COL] = v_grid[i] * math.sin(h)
    states[:, LEN_COL] = dims[0]
    states[:, WID_COL] = dims[1]
    states[:, VALID_COL] = 1.0
    return states


def _smoothed_noise(rng, n: int, window: int = 7) -> np.ndarray:
    """Low-passed unit white noise, shape (n, 2)."""
    white = rng.standard_normal((n + window - 1, 2))
    kernel = np.hanning(window + 2)[1:-1]
    kernel = kernel / kernel.sum()
    out = np.empty((n, 2))
    for c in range(2):
        out[:, c] = np.convolve(white[:, c], kernel, mode="valid")
    return out


def _apply_waypoint_noise(rng, states: np.ndarray, sigma: float) -> np.ndarray:
    """Perturb x,y with smoothed noise scaled by the local step length."""
    if sigma <= 0:
        return states
    xy = states[:, X_COL:Y_COL + 1]
    step = np.linalg.norm(np.diff(xy, axis=0), axis=-1)
    step = np.concatenate([step, step[-1:]]) if len(step) else np.zeros(1)
    scale = sigma * np.minimum(step, 1.0)
    out = states.copy()
    out[:, X_COL:Y_COL + 1] = xy + _smoothed_noise(rng, len(xy)) * scale[:, None]
    return out


def _rigid_transform(rng):
    """Random rotation + translation applied to a whole scene."""
    ang = rng.uniform(0.0, 2.0 * math.pi)
    off = rng.uniform(-200.0, 200.0, size=2)
    c, s = math.cos(ang), math.sin(ang)
    rot = np.array([[c, -s], [s, c]])

    def xf_states(states):
        out = states.copy()
        out[:, X_COL:Y_COL + 1] = states[:, X_COL:Y_COL + 1] @ rot.T + off
        out[:, VX_COL:VY_COL + 1] = states[:, VX_COL:VY_COL + 1] @ rot.T
        out[:, H_COL] = states[:, H_COL] + ang
        return out

    def xf_points(pts):
        return pts @ rot.T + off

    return xf_states, xf_points


def _parked_track(rng, pos, heading, t_grid, dims=VEHICLE_DIMS):
    n = len(t_grid)
    states = np.zeros((n, len(STATE_COLS)))
    states[:, T_COL] = t_grid
    states[:, X_COL] = pos[0]
    states[:, Y_COL] = pos[1]
    states[:, H_COL] = heading
    states[:, LEN_COL] = dims[0]
    states[:, WID_COL] = dims[1]
    states[:, VALID_COL] = 1.0
    return states


def _build_template(rng, cfg: SyntheticConfig, maneuver: str):
    """Target path/profile, road polylines, and neighbor paths for a template.

    Geometry is built in a canonical frame (target starts at the origin
    heading +x or +y); the caller applies a random rigid transform.
    """
    h, dt = cfg.history_steps, cfg.dt
    roads = []
    neighbors = []  # (path, v0, accel, start_offset_s)

    if cfg.template in ("t_junction", "four_way"):
        v0 = rng.uniform(4.0, 8.0)
        radius = rng.uniform(6.0, 12.0)
        gap = rng.uniform(1.0, 4.0)
        approach = v0 * h * dt + gap
        junction_y = approach + radius
        path = PathBuilder(0.0, 0.0, math.pi / 2).straight(approach)
        if maneuver == "left":
            path.turn(radius, math.pi / 2)
        elif maneuver == "right":
            path.turn(radius, -math.pi / 2)
        elif maneuver != "straight":
            raise ValidationError(f"unknown maneuver {maneuver!r}")
        path.straight(140.0)
        bar = np.array([[-80.0, junction_y], [80.0, junction_y]])
        roads.append(Polyline("lane_center", bar))
        if cfg.template == "t_junction":
            roads.append(Polyline("lane_center",
                                  np.array([[0.0, -15.0], [0.0, junction_y]])))
            roads.append(Polyline("road_edge",
                                  np.array([[-80.0, junction_y + 4.0],
                                            [80.0, junction_y + 4.0]])))
        else:
            roads.append(Polyline("lane_center",
                                  np.array([[0.0, -15.0], [0.0, junction_y + 80.0]])))
        # cross traffic on the bar
        for _ in range(int(rng.integers(0, cfg.max_neighbors + 1))):
            if rng.random() < 0.3:
                off = rng.uniform(-25.0, 25.0, size=2) + np.array([0.0, junction_y])
                neighbors.append(("parked", off, rng.uniform(0, 2 * math.pi)))
            else:
                direction = 1.0 if rng.random() < 0.5 else -1.0
                x0 = -direction * rng.uniform(15.0, 60.0)
                p = PathBuilder(x0, junction_y, 0.0 if direction > 0 else math.pi)
                p.straight(160.0)
                neighbors.append(("moving", p, rng.uniform(3.0, 9.0), 0.0))
        accel = 0.0
        v_init = v0
    elif cfg.template == "lane_follow":
        v_init = rng.uniform(5.0, 10.0)
        accel = {"cruise": 0.0,
                 "brake": rng.uniform(-1.5, -0.5),
                 "accelerate": rng.uniform(0.5, 1.5)}[maneuver]
        span = v_init * h * dt + 180.0
        path = PathBuilder(0.0, 0.0, 0.0).straight(span)
        roads.append(Polyline("lane_center", np.array([[-10.0, 0.0], [span + 10.0, 0.0]])))
        roads.append(Polyline("road_line_broken",
                              np.array([[-10.0, 1.8], [span + 10.0, 1.8]])))
        for _ in range(int(rng.integers(0, cfg.max_neighbors + 1))):
            lane = 3.6 if rng.random() < 0.5 else 0.0
            x0 = rng.uniform(8.0, 40.0)
            p = PathBuilder(x0, lane, 0.0).straight(200.0)
            neighbors.append(("moving", p, rng.uniform(4.0, 10.0), 0.0))
    elif cfg.template == "parking_lot":
        v_init = rng.uniform(1.0, 2.5)
        radius = rng.uniform(4.0, 6.0)
        gap = rng.uniform(0.5, 2.0)
        approach = v_init * h * dt + gap
        path = PathBuilder(0.0, 0.0, 0.0).straight(approach)
        accel = 0.0
        if maneuver == "stop":
            accel = -v_init / 1.0
        elif maneuver == "pull_left":
            path.turn(radius, math.pi / 2)
        elif maneuver == "pull_right":
            path.turn(radius, -math.pi / 2)
        elif maneuver != "creep":
            raise ValidationError(f"unknown maneuver {maneuver!r}")
        path.straight(40.0)
        roads.append(Polyline("driveway", np.array([[-8.0, 0.0], [40.0, 0.0]])))
        roads.append(Polyline("parking",
                              np.array([[approach, -6.0], [approach, 6.0]])))
        for _ in range(int(rng.integers(0, cfg.max_neighbors + 1))):
            pos = np.array([rng.uniform(0.0, 25.0),
                            rng.choice([-3.0, 3.0]) + rng.uniform(-0.5, 0.5)])
            neighbors.append(("parked", pos, rng.choice([0.0, math.pi / 2])))
    else:
        raise ValidationError(f"unknown template {cfg.template!r}")
    return path, v_init, accel, roads, neighbors


def generate_scenario(cfg: SyntheticConfig, index: int, rng) -> Scenario:
    """One scenario: latent maneuver draw, clean rollout, noise, neighbors."""
    from .metrics import tri_check  # local import: metrics also imports predictor

    probs = cfg.resolved_probs()
    names = sorted(probs)
    maneuver = str(rng.choice(names, p=[probs[k] for k in names]))
    h, f, dt = cfg.history_steps, cfg.future_steps, cfg.dt
    n = h + 1 + f
    t_grid = (np.arange(n) - h) * dt

    path, v0, accel, roads, neighbor_specs = _build_template(rng, cfg, maneuver)
    v_grid, s_grid = _speed_profile(v0, accel, n, dt)
    dims = (VEHICLE_DIMS[0] + rng.uniform(-0.4, 0.4),
            VEHICLE_DIMS[1] + rng.uniform(-0.2, 0.2))
    clean = _track_from_path(path, s_grid, v_grid, t_grid, dims)

    states = clean
    if cfg.noise_sigma > 0:
        for _ in range(200):
            cand = _apply_waypoint_noise(rng, clean, cfg.noise_sigma)
            fut = cand[h + 1:, :]
            tri = tri_check(fut[:, X_COL:Y_COL + 1], fut[:, H_COL])
            if not (tri.tri_c or tri.tri_h or tri.tri_hc):
                states = cand
                break
        else:
            states = clean  # noise kept breaking feasibility; fall back to clean

    tracks = [AgentTrack("agent_0", "vehicle", states)]

    # AV: a parked observer off to the side
    av_pos = np.array([rng.uniform(8.0, 16.0) * rng.choice([-1.0, 1.0]),
                       rng.uniform(-5.0, 5.0)])
    tracks.append(AgentTrack("av", "vehicle",
                             _parked_track(rng, av_pos, rng.uniform(0, 2 * math.pi), t_grid)))

    for j, spec in enumerate(neighbor_specs):
        nid = f"n{j + 1}"
        if spec[0] == "parked":
            _, pos, heading = spec
            st = _parked_track(rng, pos, heading, t_grid)
            otype = "vehicle"
        else:
            _, npath, nv, s_off = spec
            nv_grid, ns_grid = _speed_profile(nv, 0.0, n, dt)
            ndims = VEHICLE_DIMS
            otype = "vehicle"
            if rng.random() < 0.15:
                otype = "pedestrian"
                nv_grid = np.full(n, rng.uniform(0.8, 1.6))
                ns_grid = np.concatenate([[0.0], np.cumsum(nv_grid[1:] * dt)])
                ndims = (0.8, 0.8)
            st = _track_from_path(npath, ns_grid + s_off, nv_grid, t_grid, ndims)
            st = _apply_waypoint_noise(rng, st, cfg.noise_sigma * 0.5)
        # some neighbors appear mid-history to exercise validity masks
        if rng.random() < 0.25:
            start = int(rng.integers(1, h + 1))
            st = st.copy()
            st[:start, VALID_COL] = 0.0
        tracks.append(AgentTrack(nid, otype, st))

    xf_states, xf_points = _rigid_transform(rng)
    tracks = [AgentTrack(t.id, t.object_type, xf_states(t.states)) for t in tracks]
    roads = [Polyline(p.type, xf_points(p.points)) for p in roads]

    scn = Scenario(
        tracks=tuple(tracks),
        road=tuple(roads),
        av_id="av",
        target_ids=("agent_0",),
        history_steps=h,
        future_steps=f,
        dt=dt,
        meta={"id": f"{index:06d}", "template": cfg.template,
              "maneuver": maneuver, "index": index, "seed": cfg.seed},
    )
    validate_scenario(scn, f"synthetic[{index}]")
    return scn


def generate_synthetic(cfg: SyntheticConfig) -> list:
    """All scenarios for a config; per-index child seeds keep it deterministic."""
    cfg.resolved_probs()
    seeds = np.random.SeedSequence(cfg.seed).spawn(cfg.count)
    return [generate_scenario(cfg, i, np.random.default_rng(seeds[i]))
            for i in range(cfg.count)]


# ---------------------------------------------------------------------------
# dataset directories


def generate_dataset(cfg: SyntheticConfig, root, val_fraction: float = 0.2) -> dict:
    """Write <root>/{train,val}/NNNNNN.json and manifest.json; returns the manifest."""
    if not (0.0 <= val_fraction < 1.0):
        raise ValidationError(f"val_fraction must be in [0, 1), got {val_fraction}")
    scenarios = generate_synthetic(cfg)
    os.makedirs(os.path.join(root, "train"), exist_ok=True)
    os.makedirs(os.path.join(root, "val"), exist_ok=True)
    splits: dict = {"train": [], "val": []}
    maneuvers = {}
    acc = 0.0
    for i, scn in enumerate(scenarios):
        acc += val_fraction
        if acc >= 1.0 - 1e-12:
            split = "val"
            acc -= 1.0
        else:
            split = "train"
        name = f"{i:06d}.json"
        save_scenario(scn, os.path.join(root, split, name))
        splits[split].append(name)
        maneuvers[name] = scn.meta["maneuver"]
    manifest = {
        "format": DATASET_FORMAT,
        "version": 1,
        "config": cfg.to_dict(),
        "splits": splits,
        "maneuvers": maneuvers,
    }
    with open(os.path.join(root, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return manifest


def load_manifest(root) -> dict:
    path = os.path.join(root, "manifest.json")
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise
    except json.JSONDecodeError as e:
        raise ParseError(f"{path}: invalid JSON: {e}") from e
    if doc.get("format") != DATASET_FORMAT:
        raise ParseError(f"{path}: not a {DATASET_FORMAT} manifest")
    return doc


def load_dataset(root, split: str) -> list:
    """Scenarios of one split, ordered by file name."""
    manifest = load_manifest(root)
    if split not in manifest["splits"]:
        raise ValidationError(f"unknown split {split!r}")
    out = []
    for name in sorted(manifest["splits"][split]):
        out.append(load_scenario(os.path.join(root, split, name)))
    return out


# ---------------------------------------------------------------------------
# predictions interchange


def save_predictions(path, entries: list):
    """entries: list of dicts with scenario/agent ids plus either per-head
    mixtures ("heads") or a single aggregated mixture ("prediction")."""
    doc = {"format": PREDICTIONS_FORMAT, "version": 1, "entries": entries}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")


def load_predictions(path) -> list:
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as e:
        raise ParseError(f"{path}: invalid JSON: {e}") from e
    if doc.get("format") != PREDICTIONS_FORMAT or doc.get("version") != 1:
        raise ParseError(f"{path}: not a {PREDICTIONS_FORMAT} v1 document")
    if "entries" not in doc:
        raise ParseError(f"{path}: missing required key 'entries'")
    return doc["entries"]


def entry_heads(entry: dict) -> list:
    """Per-head mixtures of a predictions entry as objects."""
    return [GaussianMixtureTrajectory.from_dict(h) for h in entry["heads"]]


def entry_prediction(entry: dict) -> GaussianMixtureTrajectory:
    """The single evaluable mixture of an entry: the aggregated one if present,
    else the sole head."""
    if "prediction" in entry:
        return GaussianMixtureTrajectory.from_dict(entry["prediction"])
    heads = entry.get("heads", [])
    if len(heads) == 1:
        return GaussianMixtureTrajectory.from_dict(heads[0])
    raise ValidationError(
        f"entry {entry.get('scenario')}/{entry.get('agent')}: multiple heads; "
        "run aggregation before evaluating")
