"""Scene encoders: agent history, agent interactions, road network.

All three run on a scenario already expressed in the modeled agent's frame
(agent at origin, heading +x).  Each produces a fixed-width embedding vector;
``combine`` concatenates them in a fixed order into the context consumed by
the prediction head.

Per-step feature layout used for tracks (invalid steps are zeroed and carry a
0 validity bit): ``[x, y, cos(h), sin(h), vx, vy, valid]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import Value, concat, lstm_forward, mlp_forward
from .errors import DimensionError, DomainError
from .mcg import MCGParams, init_mcg_params, mcg_forward
from .params import ParamBundle, init_lstm_params, init_mlp_params, uniform_init
from .scene import (H_COL, ROAD_TYPES, VALID_COL, VX_COL, VY_COL, X_COL,
                    Y_COL, AgentTrack, Polyline, Scenario)

TRACK_FEATURE_DIM = 7
ROAD_FEATURE_DIM = 9 + len(ROAD_TYPES)


@dataclass(frozen=True)
class Embedding:
    """A fixed-width encoder output; ``kind`` names which stage produced it."""

    kind: str  # state | interaction | road | combined
    values: Value

    @property
    def width(self) -> int:
        return self.values.data.size


# ---------------------------------------------------------------------------
# road geometry
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Segment:
    """A piece of a road polyline after length-bounded re-splitting."""

    a: np.ndarray
    b: np.ndarray
    type: str
    a_tangent: np.ndarray  # unit tangent of the original curve at a
    poly_index: int
    seg_index: int
    distance: float  # point-to-segment distance from the origin


@dataclass(frozen=True)
class RoadSegmentFeature:
    r_norm: float
    r_unit: np.ndarray        # zero when the origin sits on the segment
    seg_dir: np.ndarray
    seg_len: float
    b_minus_r_norm: float
    a_perp: np.ndarray        # unit tangent at the segment start on the source curve
    type_onehot: np.ndarray

    def to_vector(self) -> np.ndarray:
        return np.concatenate([
            [self.r_norm], self.r_unit, self.seg_dir, [self.seg_len],
            [self.b_minus_r_norm], self.a_perp, self.type_onehot,
        ])


def _vertex_tangents(points: np.ndarray) -> np.ndarray:
    """Unit tangents at polyline vertices: central differences inside, edge
    directions at the ends.  Degenerate spans fall back to the x axis."""
    n = points.shape[0]
    t = np.zeros((n, 2))
    t[0] = points[1] - points[0]
    t[-1] = points[-1] - points[-2]
    if n > 2:
        t[1:-1] = points[2:] - points[:-2]
    norms = np.linalg.norm(t, axis=1)
    out = np.zeros_like(t)
    ok = norms > 1e-12
    out[ok] = t[ok] / norms[ok, None]
    out[~ok] = (1.0, 0.0)
    return out


def _point_segment_distance(a: np.ndarray, b: np.ndarray) -> float:
    d = b - a
    L2 = float(d @ d)
    if L2 <= 0.0:
        return float(np.linalg.norm(a))
    s = min(1.0, max(0.0, float(-(a @ d)) / L2))
    return float(np.linalg.norm(a + s * d))


def split_polyline(pl: Polyline, poly_index: int, max_segment_length: float):
    """Decompose a polyline into segments no longer than ``max_segment_length``.

    Sub-segments of one source edge share that edge's direction; tangents at
    source vertices come from the adjacent vertices, so curvature information
    survives the split.
    """
    if max_segment_length <= 0:
        raise DomainError("max_segment_length must be positive")
    pts = pl.points
    tangents = _vertex_tangents(pts)
    segs = []
    k = 0
    for j in range(pts.shape[0] - 1):
        a, b = pts[j], pts[j + 1]
        edge = b - a
        length = float(np.linalg.norm(edge))
        if length <= 1e-12:
            continue  # drop zero-length edges
        pieces = max(1, int(math.ceil(length / max_segment_length)))
        direction = edge / length
        for p in range(pieces):
            pa = a + edge * (p / pieces)
            pb = a + edge * ((p + 1) / pieces)
            tangent = tangents[j] if p == 0 else direction
            segs.append(Segment(pa, pb, pl.type, tangent, poly_index, k,
                                _point_segment_distance(pa, pb)))
            k += 1
    return segs


def select_closest_segments(road, max_segments: int, max_segment_length: float = 5.0):
    """The ``max_segments`` segments nearest the origin, distance ascending;
    ties break on (polyline index, segment index)."""
    if max_segments < 1:
        raise DomainError("max_segments must be >= 1")
    segs = []
    for i, pl in enumerate(road):
        segs.extend(split_polyline(pl, i, max_segment_length))
    segs.sort(key=lambda s: (s.distance, s.poly_index, s.seg_index))
    return segs[:max_segments]


def road_segment_features(seg: Segment) -> RoadSegmentFeature:
    """Feature vector for one segment, relative to the origin."""
    a, b = seg.a, seg.b
    d = b - a
    seg_len = float(np.linalg.norm(d))
    if seg_len <= 1e-12:
        raise DomainError("zero-length segment has no direction")
    seg_dir = d / seg_len
    s = min(1.0, max(0.0, float(-(a @ d)) / (seg_len * seg_len)))
    r = a + s * d
    r_norm = float(np.linalg.norm(r))
    r_unit = r / r_norm if r_norm >= 1e-9 else np.zeros(2)
    onehot = np.zeros(len(ROAD_TYPES))
    idx = ROAD_TYPES.index(seg.type) if seg.type in ROAD_TYPES else len(ROAD_TYPES) - 1
    onehot[idx] = 1.0
    return RoadSegmentFeature(
        r_norm=r_norm,
        r_unit=r_unit,
        seg_dir=seg_dir,
        seg_len=seg_len,
        b_minus_r_norm=float(np.linalg.norm(b - r)),
        a_perp=seg.a_tangent,
        type_onehot=onehot,
    )


# ---------------------------------------------------------------------------
# track features
# ---------------------------------------------------------------------------


def track_step_features(track: AgentTrack, rows) -> np.ndarray:
    """(len(rows), 7) per-step features; invalid steps zeroed with a 0 flag."""
    out = np.zeros((len(rows), TRACK_FEATURE_DIM))
    st = track.states
    for i, j in enumerate(rows):
        if st[j, VALID_COL] > 0.5:
            out[i] = (st[j, X_COL], st[j, Y_COL], math.cos(st[j, H_COL]),
                      math.sin(st[j, H_COL]), st[j, VX_COL], st[j, VY_COL], 1.0)
    return out


def _diff_features(feats: np.ndarray) -> np.ndarray:
    """Differences of consecutive steps; a pair is valid only if both are."""
    n = feats.shape[0] - 1
    out = np.zeros((n, TRACK_FEATURE_DIM))
    for i in range(n):
        if feats[i, -1] > 0.5 and feats[i + 1, -1] > 0.5:
            out[i, :-1] = feats[i + 1, :-1] - feats[i, :-1]
            out[i, -1] = 1.0
    return out


# ---------------------------------------------------------------------------
# parameter construction
# ---------------------------------------------------------------------------


@dataclass
class EncoderParams:
    bundle: ParamBundle
    prefix: str
    history_steps: int
    dt: float
    lstm_hidden: int
    hist_mcg: MCGParams
    int_mcg: MCGParams
    road_mcg: MCGParams
    road_mlp_sizes: list
    max_road_segments: int
    max_segment_length: float

    @property
    def state_width(self) -> int:
        return 2 * self.lstm_hidden + self.hist_mcg.width

    @property
    def combined_width(self) -> int:
        return self.state_width + self.int_mcg.width + self.road_mcg.width


def init_encoder_params(bundle: ParamBundle, rng, *, prefix: str = "enc.",
                        history_steps: int = 5, dt: float = 0.2,
                        lstm_hidden: int = 64, mcg_width: int = 64,
                        mcg_depth: int = 5, cg_hidden_layers: int = 2,
                        pooling: str = "max", max_road_segments: int = 128,
                        max_segment_length: float = 5.0) -> EncoderParams:
    h = history_steps
    init_lstm_params(bundle, f"{prefix}hist.abs.", TRACK_FEATURE_DIM, lstm_hidden, rng)
    init_lstm_params(bundle, f"{prefix}hist.diff.", TRACK_FEATURE_DIM, lstm_hidden, rng)
    bundle.add(f"{prefix}hist.diff_null", uniform_init(rng, (lstm_hidden,), lstm_hidden))
    set_elem = 4 + (h + 1)  # x, y, time offset, valid, one-hot frame id
    hist_mcg = init_mcg_params(bundle, f"{prefix}hist.set.", set_elem, mcg_width,
                               mcg_depth, rng, context_in=None,
                               hidden_layers=cg_hidden_layers, pooling=pooling)
    state_width = 2 * lstm_hidden + mcg_width
    init_lstm_params(bundle, f"{prefix}int.lstm.", TRACK_FEATURE_DIM, lstm_hidden, rng)
    bundle.add(f"{prefix}int.av_null", uniform_init(rng, (lstm_hidden,), lstm_hidden))
    bundle.add(f"{prefix}int.null", uniform_init(rng, (lstm_hidden,), lstm_hidden))
    int_mcg = init_mcg_params(bundle, f"{prefix}int.mcg.", lstm_hidden, mcg_width,
                              mcg_depth, rng, context_in=state_width + lstm_hidden,
                              hidden_layers=cg_hidden_layers, pooling=pooling)
    road_mlp_sizes = [ROAD_FEATURE_DIM, mcg_width, mcg_width]
    init_mlp_params(bundle, f"{prefix}road.mlp.", road_mlp_sizes, rng)
    bundle.add(f"{prefix}road.null", uniform_init(rng, (mcg_width,), mcg_width))
    road_mcg = init_mcg_params(bundle, f"{prefix}road.mcg.", mcg_width, mcg_width,
                               mcg_depth, rng, context_in=state_width,
                               hidden_layers=cg_hidden_layers, pooling=pooling)
    return EncoderParams(bundle, prefix, h, dt, lstm_hidden, hist_mcg, int_mcg,
                         road_mcg, road_mlp_sizes, max_road_segments, max_segment_length)


# ---------------------------------------------------------------------------
# encoders
# ---------------------------------------------------------------------------


def encode_history(track: AgentTrack, enc: EncoderParams) -> Embedding:
    """State embedding: LSTM over absolute history, LSTM over step
    differences, and a gated-set summary of (position, time offset, frame id)
    elements, concatenated."""
    h = enc.history_steps
    rows = list(range(h + 1))
    feats = track_step_features(track, rows)
    abs_h = lstm_forward([Value(f) for f in feats], enc.bundle, f"{enc.prefix}hist.abs.")
    diffs = _diff_features(feats)
    if diffs.shape[0] == 0:
        diff_h = enc.bundle[f"{enc.prefix}hist.diff_null"]
    else:
        diff_h = lstm_forward([Value(f) for f in diffs], enc.bundle, f"{enc.prefix}hist.diff.")
    elems = []
    eye = np.eye(h + 1)
    for i, j in enumerate(rows):
        valid = feats[i, -1]
        t_off = (j - h) * enc.dt
        elems.append(Value(np.concatenate([feats[i, :2] * valid, [t_off, valid], eye[i]])))
    _, set_ctx = mcg_forward(elems, None, enc.hist_mcg)
    return Embedding("state", concat([abs_h, diff_h, set_ctx]))


def encode_interactions(scenario: Scenario, agent_id: str, enc: EncoderParams,
                        state: Embedding) -> Embedding:
    """Interaction embedding: shared LSTM per neighbor history, fused by the
    gated stack with context (state embedding, AV embedding).

    If the modeled agent is itself the AV (or the AV has no usable history)
    a learned stand-in takes the AV slot.  With no neighbors at all the set
    holds one learned null element.
    """
    h = enc.history_steps
    rows = list(range(h + 1))
    av_emb = None
    elems = []
    for tr in scenario.tracks:
        if tr.id == agent_id:
            continue
        feats = track_step_features(tr, rows)
        if not np.any(feats[:, -1] > 0.5):
            continue
        emb = lstm_forward([Value(f) for f in feats], enc.bundle, f"{enc.prefix}int.lstm.")
        elems.append(emb)
        if tr.id == scenario.av_id:
            av_emb = emb
    if av_emb is None:
        av_emb = enc.bundle[f"{enc.prefix}int.av_null"]
    if not elems:
        elems = [enc.bundle[f"{enc.prefix}int.null"]]
    ctx = concat([state.values, av_emb])
    _, out = mcg_forward(elems, ctx, enc.int_mcg)
    return Embedding("interaction", out)


def encode_road(scenario: Scenario, enc: EncoderParams, state: Embedding) -> Embedding:
    """Road embedding: nearest segments -> shared MLP -> gated stack with the
    state embedding as context."""
    segs = select_closest_segments(scenario.road, enc.max_road_segments,
                                   enc.max_segment_length)
    elems = []
    for s in segs:
        vec = road_segment_features(s).to_vector()
        elems.append(mlp_forward(Value(vec), enc.bundle, enc.road_mlp_sizes,
                                 "relu", f"{enc.prefix}road.mlp."))
    if not elems:
        elems = [enc.bundle[f"{enc.prefix}road.null"]]
    _, out = mcg_forward(elems, state.values, enc.road_mcg)
    return Embedding("road", out)


def combine(state: Embedding, interaction: Embedding, road: Embedding) -> Embedding:
    """Fixed-order concatenation of the three encoder outputs."""
    for e, kind in ((state, "state"), (interaction, "interaction"), (road, "road")):
        if e.kind != kind:
            raise DimensionError(f"combine expected {kind} embedding, got {e.kind}")
    return Embedding("combined", concat([state.values, interaction.values, road.values]))


def encode_scene(scenario: Scenario, agent_id: str, enc: EncoderParams) -> Embedding:
    """history -> interactions -> road -> combined, in the fixed order."""
    state = encode_history(scenario.track(agent_id), enc)
    inter = encode_interactions(scenario, agent_id, enc, state)
    road = encode_road(scenario, enc, state)
    return combine(state, inter, road)
