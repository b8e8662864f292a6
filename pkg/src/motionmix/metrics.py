"""Benchmark metrics: minDE / minADE / miss rate, bucketed mAP, oriented-box
overlap rate, and the three turning-radius infeasibility checks.

Distance metrics operate on the k most-likely modes (by weight, ties broken
toward the lower index).  The miss rate here is the plain distance-threshold
definition and is labelled "MR (simple)" in reports; leaderboard variants with
velocity-scaled thresholds are out of scope.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError
from .predictor import GaussianMixtureTrajectory
from .scene import wrap_angle

log = logging.getLogger(__name__)

BUCKETS = ("stationary", "straight", "left", "right", "u_turn")

STATIONARY_TRAVEL = 2.0      # m of path length below which gt is stationary
STRAIGHT_MAX_TURN = math.radians(15.0)
U_TURN_MIN_TURN = math.radians(135.0)

TRI_RADIUS = 3.5             # m, midsize-sedan minimum turning radius
TRI_THETA_TOL = 0.05         # rad, heading-vs-curvature consistency slack


def top_k_indices(weights: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest weights, ties resolved toward lower index."""
    order = np.lexsort((np.arange(weights.size), -weights))
    return order[: max(0, k)]


def _step_for_time(pred: GaussianMixtureTrajectory, t: float) -> int:
    step = int(round(t / pred.dt)) - 1
    if step < 0 or step >= pred.n_steps:
        raise DomainError(f"time {t} s is outside the {pred.n_steps}-step horizon")
    return step


def min_de(pred: GaussianMixtureTrajectory, gt: np.ndarray, t: float, k: int = 6,
           gt_valid: np.ndarray | None = None) -> float:
    """Minimum final-displacement error at time t over the top-k modes.

    Returns nan when the groundtruth is invalid at t; dataset-level metrics
    skip such examples.
    """
    step = _step_for_time(pred, t)
    if gt_valid is not None and not bool(gt_valid[step]):
        return float("nan")
    idx = top_k_indices(pred.weights, k)
    d = np.linalg.norm(pred.means[idx, step] - gt[step], axis=-1)
    return float(d.min())


def min_ade(pred: GaussianMixtureTrajectory, gt: np.ndarray, k: int = 6,
            gt_valid: np.ndarray | None = None) -> float:
    """Minimum over top-k modes of the displacement averaged over valid steps."""
    if gt_valid is None:
        gt_valid = np.ones(len(gt), dtype=bool)
    mask = np.asarray(gt_valid, dtype=bool)
    if not mask.any():
        return float("nan")
    idx = top_k_indices(pred.weights, k)
    d = np.linalg.norm(pred.means[idx][:, mask] - gt[mask], axis=-1).mean(axis=-1)
    return float(d.min())


def miss_rate(des: list, d: float) -> float:
    """Fraction of (non-nan) final-displacement errors exceeding d."""
    if d <= 0:
        raise DomainError("miss-rate threshold d must be positive")
    vals = [x for x in des if not math.isnan(x)]
    if not vals:
        return 0.0
    return sum(1 for x in vals if x > d) / len(vals)


def classify_bucket(gt: np.ndarray, gt_valid: np.ndarray | None = None) -> str:
    """Assign a groundtruth future to one of the five behavior buckets.

    Stationary: total path length < 2 m.  Otherwise the net change of travel
    direction (first to last displacement) decides: < 15 deg straight,
    > 135 deg u-turn, else left/right by sign (counter-clockwise positive).
    """
    if gt_valid is not None:
        pts = np.asarray(gt)[np.asarray(gt_valid, dtype=bool)]
    else:
        pts = np.asarray(gt)
    if len(pts) < 2:
        raise DomainError("bucket classification needs at least 2 valid steps")
    steps = np.diff(pts, axis=0)
    seg = np.linalg.norm(steps, axis=-1)
    if float(seg.sum()) < STATIONARY_TRAVEL:
        return "stationary"
    moving = steps[seg > 1e-9]
    if len(moving) == 0:
        return "stationary"
    first, last = moving[0], moving[-1]
    turn = wrap_angle(math.atan2(last[1], last[0]) - math.atan2(first[1], first[0]))
    if abs(turn) < STRAIGHT_MAX_TURN:
        return "straight"
    if abs(turn) > U_TURN_MIN_TURN:
        return "u_turn"
    return "left" if turn > 0 else "right"


# ---------------------------------------------------------------------------
# mAP


def _example_labels(pred: GaussianMixtureTrajectory, gt: np.ndarray, step: int,
                    k: int, tau_d: float):
    """(score, is_tp) per top-k mode; at most one TP: the mode closest to the
    groundtruth at the final step, provided it lies within tau_d."""
    idx = top_k_indices(pred.weights, k)
    d = np.linalg.norm(pred.means[idx, step] - gt[step], axis=-1)
    best = int(np.argmin(d))
    rows = []
    for j, mode in enumerate(idx):
        tp = j == best and d[best] <= tau_d
        rows.append((float(pred.weights[mode]), bool(tp)))
    return rows


def average_precision(scored: list, n_gt: int) -> float:
    """Area under the interpolated precision-recall curve.

    ``scored`` is a list of (confidence, is_tp); ranking is by confidence
    descending with ties kept in input order.
    """
    if n_gt <= 0:
        return 0.0
    order = sorted(range(len(scored)), key=lambda i: (-scored[i][0], i))
    tp_cum = 0
    recalls, precisions = [], []
    for rank, i in enumerate(order, start=1):
        tp_cum += 1 if scored[i][1] else 0
        recalls.append(tp_cum / n_gt)
        precisions.append(tp_cum / rank)
    # all-point interpolation: precision envelope from the right
    env = [0.0] * len(precisions)
    running = 0.0
    for i in range(len(precisions) - 1, -1, -1):
        running = max(running, precisions[i])
        env[i] = running
    ap = 0.0
    prev_r = 0.0
    for i, r in enumerate(recalls):
        if r > prev_r:
            ap += (r - prev_r) * env[i]
            prev_r = r
    return ap


def m_ap(cases: list, k: int, t: float, tau_d: float = 2.0):
    """Bucketed mean average precision.

    ``cases`` is a list of (prediction, gt, gt_valid).  Each example
    contributes one groundtruth to its bucket; predictions pool per bucket and
    rank by mode weight.  Buckets with no examples are excluded from the mean.
    Returns (map, {bucket: ap}).
    """
    if tau_d <= 0:
        raise DomainError("tau_d must be positive")
    pooled: dict = {b: [] for b in BUCKETS}
    counts = {b: 0 for b in BUCKETS}
    for pred, gt, gt_valid in cases:
        step = _step_for_time(pred, t)
        if gt_valid is not None and not bool(gt_valid[step]):
            continue
        bucket = classify_bucket(gt, gt_valid)
        counts[bucket] += 1
        pooled[bucket].extend(_example_labels(pred, gt, step, k, tau_d))
    per_bucket = {}
    for b in BUCKETS:
        if counts[b] == 0:
            log.info("mAP: bucket %r empty, excluded from the mean", b)
            continue
        per_bucket[b] = average_precision(pooled[b], counts[b])
    overall = sum(per_bucket.values()) / len(per_bucket) if per_bucket else 0.0
    return overall, per_bucket


# ---------------------------------------------------------------------------
# oriented-box overlap


def box_corners(center, heading: float, length: float, width: float) -> np.ndarray:
    """Corners (4, 2) of an oriented rectangle, length along the heading."""
    c, s = math.cos(heading), math.sin(heading)
    u = np.array([c, s]) * (length / 2.0)
    v = np.array([-s, c]) * (width / 2.0)
    ctr = np.asarray(center, dtype=float)
    return np.stack([ctr + u + v, ctr + u - v, ctr - u - v, ctr - u + v])


def boxes_intersect(a: np.ndarray, b: np.ndarray) -> bool:
    """Separating-axis test for two convex quads given as (4, 2) corners."""
    for quad in (a, b):
        for i in range(4):
            edge = quad[(i + 1) % 4] - quad[i]
            axis = np.array([-edge[1], edge[0]])
            n = float(np.hypot(axis[0], axis[1]))
            if n < 1e-12:
                continue
            pa = a @ axis
            pb = b @ axis
            if pa.max() < pb.min() or pb.max() < pa.min():
                return False
    return True


def _displacement_headings(points: np.ndarray) -> np.ndarray:
    """Per-step headings from displacements; stationary steps reuse the last
    moving direction (0 if none yet)."""
    n = len(points)
    out = np.zeros(n)
    prev = 0.0
    for i in range(n):
        j = i + 1 if i + 1 < n else i
        d = points[j] - points[i - 1 if i > 0 else 0]
        if np.hypot(d[0], d[1]) > 1e-9:
            prev = math.atan2(d[1], d[0])
        out[i] = prev
    return out


def overlap_rate(predicted: dict, gt_futures: dict, dims: dict) -> float:
    """Fraction of predicted agents whose most-likely trajectory's oriented box
    intersects any *other* agent's groundtruth box at a common timestep.

    predicted:  agent id -> GaussianMixtureTrajectory
    gt_futures: agent id -> (xy (T, 2), heading (T,), valid (T,))
    dims:       agent id -> (length, width)
    """
    if not predicted:
        return 0.0
    hits = 0
    for aid, pred in predicted.items():
        top = int(top_k_indices(pred.weights, 1)[0])
        path = pred.means[top]
        if pred.headings is not None:
            headings = pred.headings[top]
        else:
            headings = _displacement_headings(path)
        la, wa = dims[aid]
        overlapped = False
        for oid, (oxy, ohead, ovalid) in gt_futures.items():
            if oid == aid or overlapped:
                continue
            lo, wo = dims[oid]
            t_common = min(len(path), len(oxy))
            for step in range(t_common):
                if not bool(ovalid[step]):
                    continue
                ba = box_corners(path[step], float(headings[step]), la, wa)
                bo = box_corners(oxy[step], float(ohead[step]), lo, wo)
                if boxes_intersect(ba, bo):
                    overlapped = True
                    break
        hits += 1 if overlapped else 0
    return hits / len(predicted)


# ---------------------------------------------------------------------------
# turning-radius infeasibility


def circumradius(p1, p2, p3) -> float:
    """Circumradius of a waypoint triple; collinear (or repeated) points give
    infinity."""
    p1 = np.asarray(p1, dtype=float)
    p2 = np.asarray(p2, dtype=float)
    p3 = np.asarray(p3, dtype=float)
    a = float(np.hypot(*(p2 - p1)))
    b = float(np.hypot(*(p3 - p2)))
    c = float(np.hypot(*(p3 - p1)))
    cross = float((p2[0] - p1[0]) * (p3[1] - p1[1]) - (p2[1] - p1[1]) * (p3[0] - p1[0]))
    area2 = abs(cross)
    if area2 < 1e-12:
        return float("inf")
    return a * b * c / (2.0 * area2)


@dataclass(frozen=True)
class TriResult:
    """Infeasibility flags; heading-based checks are None without headings."""

    tri_c: bool
    tri_h: bool | None
    tri_hc: bool | None


def tri_check(points: np.ndarray, headings: np.ndarray | None = None,
              tau_r: float = TRI_RADIUS, theta_tol: float = TRI_THETA_TOL) -> TriResult:
    """Three turning-radius checks on one trajectory.

    TRI-c flags a circumradius below tau_r on any consecutive waypoint triple.
    TRI-h flags a radius below tau_r implied by the heading rate (step arc
    length over |heading change|).  TRI-hc flags an inconsistency above
    theta_tol between the heading change implied by the waypoint geometry
    (turn between successive chords) and the predicted heading change over the
    same span.
    """
    pts = np.asarray(points, dtype=float)
    if len(pts) < 3:
        raise DomainError("tri_check needs at least 3 waypoints")
    tri_c = False
    for i in range(len(pts) - 2):
        if circumradius(pts[i], pts[i + 1], pts[i + 2]) < tau_r:
            tri_c = True
            break
    if headings is None:
        return TriResult(tri_c, None, None)
    th = np.asarray(headings, dtype=float)
    tri_h = False
    for i in range(len(pts) - 1):
        arc = float(np.hypot(*(pts[i + 1] - pts[i])))
        dth = abs(wrap_angle(th[i + 1] - th[i]))
        if dth > 1e-12 and arc / dth < tau_r:
            tri_h = True
            break
    tri_hc = False
    for i in range(1, len(pts) - 1):
        u = pts[i] - pts[i - 1]
        v = pts[i + 1] - pts[i]
        if np.hypot(*u) < 1e-9 or np.hypot(*v) < 1e-9:
            continue
        chord_turn = math.atan2(u[0] * v[1] - u[1] * v[0], u[0] * v[0] + u[1] * v[1])
        pred_turn = wrap_angle(th[i + 1] - th[i - 1]) / 2.0
        if abs(chord_turn - pred_turn) > theta_tol:
            tri_hc = True
            break
    return TriResult(tri_c, tri_h, tri_hc)


# ---------------------------------------------------------------------------
# report


@dataclass
class CaseMetrics:
    scenario_id: str
    agent_id: int
    bucket: str
    min_de: float
    min_ade: float
    missed: bool
    tri_c: bool
    tri_h: bool | None
    tri_hc: bool | None


@dataclass
class MetricsReport:
    """Aggregate metrics with the evaluation settings baked in."""

    k: int
    t: float
    d: float
    min_de: float
    min_ade: float
    mr_simple: float
    map_overall: float
    map_per_bucket: dict
    tri_c: float
    tri_h: float | None
    tri_hc: float | None
    overlap_rate: float | None = None
    counts: dict = field(default_factory=dict)

    def validate(self):
        rates = [self.mr_simple, self.map_overall, self.tri_c]
        rates += [r for r in (self.tri_h, self.tri_hc, self.overlap_rate) if r is not None]
        rates += list(self.map_per_bucket.values())
        for r in rates:
            if not (0.0 <= r <= 1.0):
                raise DomainError(f"rate {r} outside [0, 1]")
        if self.min_de < 0 or self.min_ade < 0:
            raise DomainError("distances must be non-negative")

    def to_dict(self) -> dict:
        return {
            "k": self.k,
            "t": self.t,
            "d": self.d,
            "min_de": self.min_de,
            "min_ade": self.min_ade,
            "mr_simple": self.mr_simple,
            "map": self.map_overall,
            "map_per_bucket": dict(self.map_per_bucket),
            "overlap_rate": self.overlap_rate,
            "tri_c": self.tri_c,
            "tri_h": self.tri_h,
            "tri_hc": self.tri_hc,
            "counts": dict(self.counts),
        }

    def to_json(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def evaluate_cases(cases: list, k: int, t: float, d: float, tau_map: float = 2.0,
                   overlap: float | None = None):
    """Compute the full report plus per-example rows.

    ``cases`` is a list of (scenario_id, agent_id, prediction, gt, gt_valid).
    Examples whose groundtruth is invalid at t are skipped for distance
    metrics but still counted.
    """
    rows: list[CaseMetrics] = []
    des, ades = [], []
    tri_c_flags, tri_h_flags, tri_hc_flags = [], [], []
    for sid, aid, pred, gt, gt_valid in cases:
        de = min_de(pred, gt, t, k, gt_valid)
        ade = min_ade(pred, gt, k, gt_valid)
        bucket = classify_bucket(gt, gt_valid)
        top = int(top_k_indices(pred.weights, 1)[0])
        tri = tri_check(pred.means[top],
                        None if pred.headings is None else pred.headings[top])
        if not math.isnan(de):
            des.append(de)
        if not math.isnan(ade):
            ades.append(ade)
        tri_c_flags.append(tri.tri_c)
        if tri.tri_h is not None:
            tri_h_flags.append(tri.tri_h)
        if tri.tri_hc is not None:
            tri_hc_flags.append(tri.tri_hc)
        rows.append(CaseMetrics(sid, aid, bucket, de, ade,
                                (not math.isnan(de)) and de > d,
                                tri.tri_c, tri.tri_h, tri.tri_hc))
    overall_map, per_bucket = m_ap([(p, g, v) for _, _, p, g, v in cases], k, t, tau_map)
    counts = {b: sum(1 for r in rows if r.bucket == b) for b in BUCKETS}
    counts["total"] = len(rows)
    counts["skipped"] = sum(1 for r in rows if math.isnan(r.min_de))
    report = MetricsReport(
        k=k, t=t, d=d,
        min_de=float(np.mean(des)) if des else 0.0,
        min_ade=float(np.mean(ades)) if ades else 0.0,
        mr_simple=miss_rate([r.min_de for r in rows], d),
        map_overall=overall_map,
        map_per_bucket=per_bucket,
        tri_c=sum(tri_c_flags) / len(tri_c_flags) if tri_c_flags else 0.0,
        tri_h=sum(tri_h_flags) / len(tri_h_flags) if tri_h_flags else None,
        tri_hc=sum(tri_hc_flags) / len(tri_hc_flags) if tri_hc_flags else None,
        overlap_rate=overlap,
        counts=counts,
    )
    report.validate()
    return report, rows


def write_case_csv(path, rows: list):
    """Per-example dump for plotting."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["scenario_id", "agent_id", "bucket", "min_de", "min_ade",
                    "missed", "tri_c", "tri_h", "tri_hc"])
        for r in rows:
            w.writerow([r.scenario_id, r.agent_id, r.bucket,
                        repr(r.min_de), repr(r.min_ade), int(r.missed),
                        int(r.tri_c),
                        "" if r.tri_h is None else int(r.tri_h),
                        "" if r.tri_hc is None else int(r.tri_hc)])
