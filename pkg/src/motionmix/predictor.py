"""Prediction head and trajectory decoders.

The head runs the gated stack over a set of anchor embeddings with the
combined scene embedding as context, then maps each anchor through a shared
MLP to one mode's raw parameter vector.  A decoder turns raw vectors into a
Gaussian mixture over trajectories

    p(s) = sum_i  q_i * prod_t N(s_t; mu_i^t, Sigma_i^t)

with per-step 2x2 covariances.  Decoder variants:

  raw_states               per-step (mu_x, mu_y, log sx, log sy, rho_raw)
  raw_states_with_heading  per-step (mu_x, mu_y, theta, log s_lng, log s_lat)
  polynomial               degree-D coefficients per signal (x, y, theta,
                           sigma_lng, sigma_lat) over u = t/horizon
  control                  per-step (accel, heading rate) + (log s_lng,
                           log s_lat), positions by midpoint integration with
                           a curvature cap

Decoders with a heading express uncertainty in the agent-longitudinal frame
and rotate the diagonal covariance into the world frame; raw_states predicts
the correlation directly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import Value, concat, mlp_forward
from .errors import DimensionError, DomainError, NumericError, ValidationError
from .mcg import MCGParams, mcg_forward

DECODERS = ("raw_states", "raw_states_with_heading", "polynomial", "control")

KAPPA_MAX = 1.0 / 3.5   # reciprocal of a midsize-sedan minimum turning radius
V_FLOOR = 0.1           # m/s, speed floor used by the curvature cap
SIGMA_MIN = 1e-3
SIGMA_MAX = 1e3
RHO_SCALE = 0.99


# ---------------------------------------------------------------------------
# containers
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class InitialState:
    """Current state of the modeled agent in its own frame."""

    x: float = 0.0
    y: float = 0.0
    heading: float = 0.0
    speed: float = 0.0
    vehicle_length: float = 0.0  # 0 disables the rear-axle correction


@dataclass
class ControlSequence:
    """Acceleration / heading-rate profile with the starting state."""

    accel: object        # (T,) array or Value
    heading_rate: object  # (T,) array or Value
    x0: float = 0.0
    y0: float = 0.0
    heading0: float = 0.0
    speed0: float = 0.0


@dataclass
class Rollout:
    x: object
    y: object
    theta: object
    v: object


@dataclass(frozen=True)
class PolynomialTrajectory:
    """Degree-D polynomial per signal over normalized time u = t/horizon.

    Coefficients are ascending (c0 + c1*u + ... + cD*u^D).  The sigma signals
    are squashed through softplus on evaluation.
    """

    x: np.ndarray
    y: np.ndarray
    theta: np.ndarray
    sigma_lng: np.ndarray
    sigma_lat: np.ndarray
    horizon: float

    @property
    def degree(self) -> int:
        return len(self.x) - 1


@dataclass
class ModeNodes:
    """Graph-valued decoded parameters of one mode."""

    logit: Value
    mean_x: Value
    mean_y: Value
    sigma_x: Value
    sigma_y: Value
    rho: Value
    heading: Value | None = None
    aux_penalty: Value | None = None  # polynomial constant-term regulariser


@dataclass
class GmmNodes:
    """Graph-valued mixture: one ModeNodes per anchor plus shared horizon."""

    modes: list
    dt: float

    def logits(self) -> Value:
        return concat([m.logit for m in self.modes])

    def means_array(self) -> np.ndarray:
        return np.stack([np.stack([m.mean_x.data, m.mean_y.data], axis=-1)
                         for m in self.modes])


@dataclass
class GaussianMixtureTrajectory:
    """Numpy mixture container used for inference, files and metrics.

    means: (M, T, 2); sigma_x/sigma_y/rho: (M, T); headings: (M, T) or None.
    """

    weights: np.ndarray
    means: np.ndarray
    sigma_x: np.ndarray
    sigma_y: np.ndarray
    rho: np.ndarray
    headings: np.ndarray | None = None
    dt: float = 0.2

    @property
    def n_modes(self) -> int:
        return self.means.shape[0]

    @property
    def n_steps(self) -> int:
        return self.means.shape[1]

    def covariances(self) -> np.ndarray:
        """(M, T, 2, 2) per-step covariance matrices."""
        sx, sy, rho = self.sigma_x, self.sigma_y, self.rho
        cov = np.empty(sx.shape + (2, 2))
        cov[..., 0, 0] = sx * sx
        cov[..., 1, 1] = sy * sy
        cov[..., 0, 1] = cov[..., 1, 0] = rho * sx * sy
        return cov

    def transformed(self, angle: float, offset) -> "GaussianMixtureTrajectory":
        """The mixture under a rigid motion: rotate by angle, then translate.

        Covariances rotate as R Sigma R^T, which keeps them expressible as
        (sigma_x, sigma_y, rho).
        """
        c, s = math.cos(angle), math.sin(angle)
        off = np.asarray(offset, dtype=np.float64)
        mx = self.means[..., 0]
        my = self.means[..., 1]
        means = np.stack([c * mx - s * my + off[0], s * mx + c * my + off[1]], axis=-1)
        v00 = self.sigma_x ** 2
        v11 = self.sigma_y ** 2
        v01 = self.rho * self.sigma_x * self.sigma_y
        w00 = c * c * v00 - 2.0 * c * s * v01 + s * s * v11
        w11 = s * s * v00 + 2.0 * c * s * v01 + c * c * v11
        w01 = c * s * (v00 - v11) + (c * c - s * s) * v01
        sx = np.sqrt(w00)
        sy = np.sqrt(w11)
        # rotation preserves |rho| < 1 exactly; the clip absorbs rounding
        rho = np.clip(w01 / (sx * sy), -(1.0 - 1e-12), 1.0 - 1e-12)
        headings = None if self.headings is None else self.headings + angle
        return GaussianMixtureTrajectory(self.weights.copy(), means, sx, sy, rho,
                                         headings, self.dt)

    def validate(self, where: str = "gmm"):
        w = self.weights
        if w.ndim != 1 or abs(float(w.sum()) - 1.0) > 1e-9 or np.any(w < 0):
            raise ValidationError(f"{where}: weights must be nonnegative and sum to 1")
        if self.means.shape != (w.size, self.sigma_x.shape[1], 2):
            raise ValidationError(f"{where}: means shape {self.means.shape} inconsistent")
        if np.any(self.sigma_x <= 0) or np.any(self.sigma_y <= 0):
            raise ValidationError(f"{where}: sigmas must be positive")
        if np.any(np.abs(self.rho) >= 1):
            raise ValidationError(f"{where}: |rho| must be < 1")
        for arr in (self.weights, self.means, self.sigma_x, self.sigma_y, self.rho):
            if not np.all(np.isfinite(arr)):
                raise ValidationError(f"{where}: non-finite mixture parameter")

    def to_dict(self) -> dict:
        d = {
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "sigma_x": self.sigma_x.tolist(),
            "sigma_y": self.sigma_y.tolist(),
            "rho": self.rho.tolist(),
            "headings": None if self.headings is None else self.headings.tolist(),
            "dt": self.dt,
        }
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GaussianMixtureTrajectory":
        headings = d.get("headings")
        return cls(
            weights=np.asarray(d["weights"], dtype=np.float64),
            means=np.asarray(d["means"], dtype=np.float64),
            sigma_x=np.asarray(d["sigma_x"], dtype=np.float64),
            sigma_y=np.asarray(d["sigma_y"], dtype=np.float64),
            rho=np.asarray(d["rho"], dtype=np.float64),
            headings=None if headings is None else np.asarray(headings, dtype=np.float64),
            dt=float(d.get("dt", 0.2)),
        )


@dataclass
class DecodeSpec:
    """Everything a decoder needs besides the raw head outputs."""

    decoder: str = "raw_states"
    future_steps: int = 40
    dt: float = 0.2
    poly_degree: int = 5
    sigma_min: float = SIGMA_MIN
    sigma_max: float = SIGMA_MAX
    rho_scale: float = RHO_SCALE
    kappa_max: float = KAPPA_MAX
    v_floor: float = V_FLOOR
    rear_axle: bool = True
    # meters per unit of raw network output on the position channels; puts
    # the decoded means on the data scale so position errors translate into
    # usefully sized optimizer steps (controls integrate, so they are exempt)
    mean_scale: float = 10.0
    base_trajectories: np.ndarray | None = None  # (M, T, 2) static anchor offsets

    def raw_width(self) -> int:
        t = self.future_steps
        if self.decoder in ("raw_states", "raw_states_with_heading"):
            return 1 + 5 * t
        if self.decoder == "control":
            return 1 + 4 * t
        if self.decoder == "polynomial":
            return 1 + 5 * (self.poly_degree + 1)
        raise DomainError(f"unknown decoder {self.decoder!r}")

    def mean_slots(self) -> list:
        """Raw-vector indices that drive the trajectory location (positions,
        or the controls / coefficients that integrate into positions)."""
        t = self.future_steps
        if self.decoder in ("raw_states", "raw_states_with_heading", "control"):
            return list(range(1, 1 + 2 * t))
        if self.decoder == "polynomial":
            d = self.poly_degree + 1
            return list(range(1, 1 + 2 * d))
        raise DomainError(f"unknown decoder {self.decoder!r}")

    def sigma_slots(self) -> list:
        """Raw-vector indices feeding the two uncertainty signals (for the
        polynomial decoder, just their constant coefficients)."""
        t = self.future_steps
        if self.decoder == "raw_states":
            return list(range(1 + 2 * t, 1 + 4 * t))
        if self.decoder == "raw_states_with_heading":
            return list(range(1 + 3 * t, 1 + 5 * t))
        if self.decoder == "control":
            return list(range(1 + 2 * t, 1 + 4 * t))
        if self.decoder == "polynomial":
            d = self.poly_degree + 1
            return [1 + 3 * d, 1 + 4 * d]
        raise DomainError(f"unknown decoder {self.decoder!r}")


# ---------------------------------------------------------------------------
# head
# ---------------------------------------------------------------------------


def predict_head(combined: Value, anchors: list, mcg: MCGParams, bundle,
                 mlp_sizes, mlp_prefix: str) -> list:
    """Raw per-mode outputs: shared MLP over the gated anchor set.

    Anchor order is preserved one-to-one into mode order, and the whole map
    is permutation-equivariant in the anchors.
    """
    gated, _ = mcg_forward(anchors, combined, mcg)
    return [mlp_forward(g, bundle, mlp_sizes, "relu", mlp_prefix) for g in gated]


# ---------------------------------------------------------------------------
# kinematics
# ---------------------------------------------------------------------------


def cap_curvature(theta_dot, v_mid, kappa_max: float = KAPPA_MAX,
                  v_floor: float = V_FLOOR):
    """Clamp a heading rate so implied curvature stays feasible:
    |theta_dot| <= kappa_max * max(|v_mid|, v_floor).  Sign preserved."""
    if kappa_max <= 0:
        raise DomainError("kappa_max must be positive")
    lim = kappa_max * np.maximum(np.abs(v_mid), v_floor)
    return np.clip(theta_dot, -lim, lim)


def _as_value(x) -> Value:
    return x if isinstance(x, Value) else Value(np.asarray(x, dtype=np.float64))


def integrate_controls(c: ControlSequence, vehicle_length: float, dt: float,
                       kappa_max: float = KAPPA_MAX, v_floor: float = V_FLOOR) -> Rollout:
    """Midpoint integration of (accel, heading rate) into (x, y, theta, v).

    Per step: v~ = v(t-dt) + a(t-dt)*dt/2; the heading rate is capped against
    the curvature limit at v~; theta~ = theta(t-dt) + cap*dt/2; the position
    advances by v~*(cos theta~, sin theta~)*dt; theta and v advance full-step.
    For a nonzero ``vehicle_length`` the integration runs at the rear-axle
    point and is mapped back to the box center afterwards.

    Differentiable end to end; returns Values when given Values, plain arrays
    otherwise.
    """
    if dt <= 0:
        raise DomainError("dt must be positive")
    graph = isinstance(c.accel, Value) or isinstance(c.heading_rate, Value)
    a = _as_value(c.accel)
    w = _as_value(c.heading_rate)
    if a.data.ndim != 1 or a.data.shape != w.data.shape:
        raise DimensionError("accel and heading_rate must be equal-length vectors")
    half = vehicle_length / 2.0
    x0 = c.x0 - half * math.cos(c.heading0)
    y0 = c.y0 - half * math.sin(c.heading0)

    v_prev = (a.cumsum() - a) * dt + c.speed0
    v_mid = v_prev + a * (dt / 2.0)
    lim = v_mid.maximum(-v_mid).maximum(v_floor) * kappa_max
    w_cap = w.minimum(lim).maximum(-lim)
    th_prev = (w_cap.cumsum() - w_cap) * dt + c.heading0
    th_mid = th_prev + w_cap * (dt / 2.0)
    x = (v_mid * th_mid.cos()).cumsum() * dt + x0
    y = (v_mid * th_mid.sin()).cumsum() * dt + y0
    theta = w_cap.cumsum() * dt + c.heading0
    v = a.cumsum() * dt + c.speed0
    if half != 0.0:
        x = x + theta.cos() * half
        y = y + theta.sin() * half
    if graph:
        return Rollout(x, y, theta, v)
    return Rollout(x.data, y.data, theta.data, v.data)


# ---------------------------------------------------------------------------
# polynomial helpers
# ---------------------------------------------------------------------------


def _horner(coeffs, u):
    """Evaluate ascending coefficients at u (floats or Values)."""
    acc = coeffs[-1]
    for c in reversed(coeffs[:-1]):
        acc = acc * u + c
    return acc


def eval_polynomial(p: PolynomialTrajectory, t: float):
    """(x, y, theta, sigma_lng, sigma_lat) at time t; domain [0, horizon]."""
    if not (0.0 <= t <= p.horizon):
        raise DomainError(f"t={t} outside [0, {p.horizon}]")
    u = t / p.horizon
    sp = lambda z: math.log1p(math.exp(-abs(z))) + max(z, 0.0)  # stable softplus
    return (
        float(_horner(p.x, u)),
        float(_horner(p.y, u)),
        float(_horner(p.theta, u)),
        sp(float(_horner(p.sigma_lng, u))),
        sp(float(_horner(p.sigma_lat, u))),
    )


def constant_term_penalty(p: PolynomialTrajectory, current: InitialState) -> float:
    """Squared deviation of the kinematic signals' u=0 values from the current
    state, summed.  The sigma signals have no current-state counterpart and
    are left out."""
    dth = math.remainder(float(p.theta[0]) - current.heading, 2.0 * math.pi)
    return (float(p.x[0]) - current.x) ** 2 + (float(p.y[0]) - current.y) ** 2 + dth**2


# ---------------------------------------------------------------------------
# decoding raw head outputs into mixtures
# ---------------------------------------------------------------------------


def _sigma_from_raw(raw: Value, spec: DecodeSpec) -> Value:
    return raw.exp().minimum(Value(spec.sigma_max)).maximum(Value(spec.sigma_min))


def _rotated_covariance(s_lng: Value, s_lat: Value, theta: Value):
    """World-frame (sigma_x, sigma_y, rho) of a heading-aligned diagonal."""
    cth, sth = theta.cos(), theta.sin()
    vl = s_lng * s_lng
    vt = s_lat * s_lat
    var_x = cth * cth * vl + sth * sth * vt
    var_y = sth * sth * vl + cth * cth * vt
    cov = cth * sth * (vl - vt)
    sx = var_x.sqrt()
    sy = var_y.sqrt()
    return sx, sy, cov / (sx * sy)


def decode_mode(raw: Value, spec: DecodeSpec, init: InitialState,
                base: np.ndarray | None = None) -> ModeNodes:
    """Decode one mode's raw vector; ``base`` is a static anchor trajectory
    (T, 2) added to the predicted offsets (residual decoding)."""
    t = spec.future_steps
    want = spec.raw_width()
    if raw.data.size != want:
        raise DimensionError(
            f"{spec.decoder}: raw output width {raw.data.size}, expected {want}")
    logit = raw[0]
    if spec.decoder == "raw_states":
        mx = raw[1 : 1 + t] * spec.mean_scale
        my = raw[1 + t : 1 + 2 * t] * spec.mean_scale
        if base is not None:
            mx = mx + Value(base[:, 0])
            my = my + Value(base[:, 1])
        sx = _sigma_from_raw(raw[1 + 2 * t : 1 + 3 * t], spec)
        sy = _sigma_from_raw(raw[1 + 3 * t : 1 + 4 * t], spec)
        rho = raw[1 + 4 * t : 1 + 5 * t].tanh() * spec.rho_scale
        return ModeNodes(logit, mx, my, sx, sy, rho)
    if base is not None:
        raise DomainError("static anchor offsets require the raw_states decoder")
    if spec.decoder == "raw_states_with_heading":
        mx = raw[1 : 1 + t] * spec.mean_scale
        my = raw[1 + t : 1 + 2 * t] * spec.mean_scale
        th = raw[1 + 2 * t : 1 + 3 * t]
        s_lng = _sigma_from_raw(raw[1 + 3 * t : 1 + 4 * t], spec)
        s_lat = _sigma_from_raw(raw[1 + 4 * t : 1 + 5 * t], spec)
        sx, sy, rho = _rotated_covariance(s_lng, s_lat, th)
        return ModeNodes(logit, mx, my, sx, sy, rho, heading=th)
    if spec.decoder == "control":
        ctrl = ControlSequence(raw[1 : 1 + t], raw[1 + t : 1 + 2 * t],
                               init.x, init.y, init.heading, init.speed)
        roll = integrate_controls(ctrl, init.vehicle_length if spec.rear_axle else 0.0,
                                  spec.dt, spec.kappa_max, spec.v_floor)
        s_lng = _sigma_from_raw(raw[1 + 2 * t : 1 + 3 * t], spec)
        s_lat = _sigma_from_raw(raw[1 + 3 * t : 1 + 4 * t], spec)
        sx, sy, rho = _rotated_covariance(s_lng, s_lat, roll.theta)
        return ModeNodes(logit, roll.x, roll.y, sx, sy, rho, heading=roll.theta)
    if spec.decoder == "polynomial":
        d = spec.poly_degree + 1
        u = Value((np.arange(1, t + 1) * spec.dt) / (t * spec.dt))
        sig = [raw[1 + i * d : 1 + (i + 1) * d] for i in range(5)]
        coeffs = [[s[j] for j in range(d)] for s in sig]
        mx = _horner(coeffs[0], u) * spec.mean_scale
        my = _horner(coeffs[1], u) * spec.mean_scale
        th = _horner(coeffs[2], u)
        s_lng = _horner(coeffs[3], u).softplus() \
            .minimum(Value(spec.sigma_max)).maximum(Value(spec.sigma_min))
        s_lat = _horner(coeffs[4], u).softplus() \
            .minimum(Value(spec.sigma_max)).maximum(Value(spec.sigma_min))
        sx, sy, rho = _rotated_covariance(s_lng, s_lat, th)
        # constant-term regulariser: the u=0 value of each kinematic signal
        # should match the current state
        dth = coeffs[2][0] - init.heading
        dth = dth - 2.0 * math.pi * round(float(dth.data) / (2.0 * math.pi))
        pen = (coeffs[0][0] * spec.mean_scale - init.x) ** 2 \
            + (coeffs[1][0] * spec.mean_scale - init.y) ** 2 + dth**2
        return ModeNodes(logit, mx, my, sx, sy, rho, heading=th, aux_penalty=pen)
    raise DomainError(f"unknown decoder {spec.decoder!r}")


def decode_modes(raws: list, spec: DecodeSpec, init: InitialState) -> GmmNodes:
    base = spec.base_trajectories
    if base is not None and len(base) != len(raws):
        raise DimensionError("one base trajectory per mode required")
    modes = [decode_mode(r, spec, init, None if base is None else base[i])
             for i, r in enumerate(raws)]
    return GmmNodes(modes, spec.dt)


def to_gmm(raws: list, spec: DecodeSpec, init: InitialState) -> GaussianMixtureTrajectory:
    """Decode raw head outputs into a numpy mixture (softmax weights, clamped
    sigmas, |rho| <= 0.99); always valid for finite raw inputs."""
    for r in raws:
        if not np.all(np.isfinite(r.data)):
            raise NumericError("non-finite raw head output")
    nodes = decode_modes(raws, spec, init)
    logits = np.array([float(m.logit.data) for m in nodes.modes])
    z = np.exp(logits - logits.max())
    weights = z / z.sum()
    means = nodes.means_array()
    gmm = GaussianMixtureTrajectory(
        weights=weights,
        means=means,
        sigma_x=np.stack([m.sigma_x.data for m in nodes.modes]),
        sigma_y=np.stack([m.sigma_y.data for m in nodes.modes]),
        rho=np.stack([m.rho.data for m in nodes.modes]),
        headings=None if nodes.modes[0].heading is None
        else np.stack([m.heading.data for m in nodes.modes]),
        dt=spec.dt,
    )
    gmm.validate("to_gmm")
    return gmm


# ---------------------------------------------------------------------------
# likelihoods
# ---------------------------------------------------------------------------

_LOG_2PI = math.log(2.0 * math.pi)


def gaussian_log_density(dx, dy, sx, sy, rho):
    """Log density of a 2-d Gaussian at residual (dx, dy); numpy arrays."""
    one_m = 1.0 - rho * rho
    z = dx * dx / (sx * sx) + dy * dy / (sy * sy) - 2.0 * rho * dx * dy / (sx * sy)
    return -_LOG_2PI - np.log(sx * sy) - 0.5 * np.log(one_m) - 0.5 * z / one_m


def gmm_log_likelihood(gmm: GaussianMixtureTrajectory, traj: np.ndarray,
                       valid: np.ndarray | None = None) -> float:
    """log p(traj) under the mixture, summed over valid steps, computed via
    log-sum-exp over modes."""
    traj = np.asarray(traj, dtype=np.float64)
    if traj.shape != (gmm.n_steps, 2):
        raise DimensionError(f"trajectory shape {traj.shape} != (T={gmm.n_steps}, 2)")
    mask = np.ones(gmm.n_steps, dtype=bool) if valid is None else np.asarray(valid, bool)
    if not mask.any():
        raise DomainError("no valid steps to evaluate")
    dx = traj[None, :, 0] - gmm.means[:, :, 0]
    dy = traj[None, :, 1] - gmm.means[:, :, 1]
    ld = gaussian_log_density(dx, dy, gmm.sigma_x, gmm.sigma_y, gmm.rho)
    per_mode = ld[:, mask].sum(axis=1) + np.log(np.maximum(gmm.weights, 1e-300))
    m = per_mode.max()
    return float(m + math.log(np.exp(per_mode - m).sum()))
