"""Ensemble aggregation: reduce E*L pooled modes to an M-mode mixture.

The pool is the union of all heads' modes with weights divided by the head
count.  Initial centroids come from a greedy coverage objective

    J(S) = sum_i q_i * 1( min_{s in S} dist(mu_i, mu_s) <= tau )

where dist is the mean per-step Euclidean distance between mean trajectories
(the greedy choice is within 1-1/e of the best subset, since J is monotone
submodular).  Refinement is an approximate EM in which the posterior of a pool
component depends only on its mean sequence:

    r_ih  ∝  q̄_h * prod_t N(mu_i^t; mū_h^t, Σ̄_h^t)
    q̄_h  =  sum_i q_i r_ih
    mū_h =  sum_i q_i r_ih mu_i / q̄_h                    (per step)
    Σ̄_h  =  sum_i q_i r_ih [Σ_i + (mu_i-mū_h)(mu_i-mū_h)^T] / q̄_h

All covariances stay per-step 2x2, so the product structure of the mixture is
preserved through aggregation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, DomainError, ValidationError
from .predictor import GaussianMixtureTrajectory

_LOG_2PI = math.log(2.0 * math.pi)
COV_JITTER = 1e-9


@dataclass
class ModePool:
    """Union of ensemble modes: weights (M',), means (M', T, 2), covs (M', T, 2, 2)."""

    weights: np.ndarray
    means: np.ndarray
    covs: np.ndarray
    dt: float = 0.2

    @property
    def size(self) -> int:
        return self.weights.size

    def validate(self):
        if abs(float(self.weights.sum()) - 1.0) > 1e-9:
            raise ValidationError("pool weights must sum to 1")
        dets = (self.covs[..., 0, 0] * self.covs[..., 1, 1]
                - self.covs[..., 0, 1] * self.covs[..., 1, 0])
        if np.any(dets <= 0) or np.any(self.covs[..., 0, 0] <= 0):
            raise ValidationError("pool covariances must be positive definite")


@dataclass
class AggState:
    """Working mixture during EM: weights (M,), means (M, T, 2), covs (M, T, 2, 2)."""

    weights: np.ndarray
    means: np.ndarray
    covs: np.ndarray


def pool_union(heads) -> ModePool:
    """Concatenate the heads' modes; weights are divided by the head count."""
    if not heads:
        raise DomainError("pool_union needs at least one head")
    t = heads[0].n_steps
    for h in heads:
        if h.n_steps != t:
            raise DimensionError("heads disagree on the horizon length")
    e = len(heads)
    weights = np.concatenate([h.weights for h in heads]) / e
    means = np.concatenate([h.means for h in heads])
    covs = np.concatenate([h.covariances() for h in heads])
    return ModePool(weights, means, covs, dt=heads[0].dt)


def trajectory_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Mean per-step Euclidean distance between two mean trajectories."""
    return float(np.linalg.norm(a - b, axis=-1).mean())


def _distance_matrix(means_a: np.ndarray, means_b: np.ndarray) -> np.ndarray:
    return np.linalg.norm(means_a[:, None] - means_b[None, :], axis=-1).mean(axis=-1)


def coverage_mass(pool: ModePool, indices, tau: float) -> float:
    """Pool mass lying within tau of at least one selected centroid."""
    if len(indices) == 0:
        return 0.0
    d = _distance_matrix(pool.means, pool.means[list(indices)])
    return float(pool.weights[(d <= tau).any(axis=1)].sum())


def greedy_init(pool: ModePool, m: int, tau: float) -> list:
    """Select M pool components by greedy marginal coverage gain.

    Ties break on higher component weight, then lower index.  The running
    objective is non-decreasing and bounded by the total pool mass.
    """
    if m > pool.size:
        raise DomainError(f"cannot select {m} of {pool.size} components")
    if tau <= 0:
        raise DomainError("tau must be positive")
    d = _distance_matrix(pool.means, pool.means)
    best = np.full(pool.size, np.inf)  # distance to the nearest selected centroid
    selected: list[int] = []
    q = pool.weights
    for _ in range(m):
        uncovered = best > tau
        gains = np.where(uncovered[:, None], d <= tau, False).T @ q  # gain per candidate
        gains[selected] = -np.inf
        order = sorted((j for j in range(pool.size) if j not in selected),
                       key=lambda j: (-gains[j], -q[j], j))
        pick = order[0]
        selected.append(pick)
        best = np.minimum(best, d[:, pick])
    return selected


def _log_gaussian_seq(x: np.ndarray, mean: np.ndarray, cov: np.ndarray) -> float:
    """Sum over steps of log N(x_t; mean_t, cov_t) for one component."""
    diff = x - mean
    det = cov[:, 0, 0] * cov[:, 1, 1] - cov[:, 0, 1] * cov[:, 1, 0]
    if np.any(det <= 0):
        return -np.inf
    quad = (cov[:, 1, 1] * diff[:, 0] ** 2 - 2.0 * cov[:, 0, 1] * diff[:, 0] * diff[:, 1]
            + cov[:, 0, 0] * diff[:, 1] ** 2) / det
    return float((-_LOG_2PI - 0.5 * np.log(det) - 0.5 * quad).sum())


def posterior(x: np.ndarray, agg: AggState) -> np.ndarray:
    """p(h | x) over the aggregate's components for a mean sequence x (T, 2).

    Computed in log space.  If every component underflows to zero density the
    posterior falls back to a one-hot on the nearest centroid (by the same
    mean per-step distance used everywhere else).
    """
    m = agg.weights.size
    log_p = np.empty(m)
    for h in range(m):
        lw = math.log(agg.weights[h]) if agg.weights[h] > 0 else -np.inf
        log_p[h] = lw + _log_gaussian_seq(x, agg.means[h], agg.covs[h])
    peak = log_p.max()
    if not np.isfinite(peak):
        d = np.array([trajectory_distance(x, agg.means[h]) for h in range(m)])
        out = np.zeros(m)
        out[int(np.argmin(d))] = 1.0
        return out
    p = np.exp(log_p - peak)
    return p / p.sum()


def em_iterate(pool: ModePool, agg: AggState, reseed_floor: float = 1e-12) -> AggState:
    """One EM round; posteriors are computed once per pool component from its
    full mean sequence.

    A component whose updated weight falls below ``reseed_floor`` is re-seeded
    at the pool component with the worst coverage (largest distance to its
    nearest centroid under the incoming state) and the weights renormalized.
    """
    m = agg.weights.size
    n, t = pool.size, pool.means.shape[1]
    r = np.stack([posterior(pool.means[i], agg) for i in range(n)])  # (n, m)
    w = pool.weights[:, None] * r
    q_new = w.sum(axis=0)

    means_new = np.empty_like(agg.means)
    covs_new = np.empty_like(agg.covs)
    reseed = []
    for h in range(m):
        if q_new[h] < reseed_floor:
            reseed.append(h)
            continue
        wh = w[:, h] / q_new[h]
        mu = (wh[:, None, None] * pool.means).sum(axis=0)
        diff = pool.means - mu[None]
        outer = diff[..., :, None] * diff[..., None, :]
        covs_new[h] = (wh[:, None, None, None] * (pool.covs + outer)).sum(axis=0)
        means_new[h] = mu
    if reseed:
        d = _distance_matrix(pool.means, agg.means).min(axis=1)
        order = iter(np.argsort(-d, kind="stable"))
        for h in reseed:
            i = int(next(order))
            means_new[h] = pool.means[i]
            covs_new[h] = pool.covs[i]
            q_new[h] = max(pool.weights[i], reseed_floor)
        q_new = q_new / q_new.sum()
    return AggState(q_new, means_new, covs_new)


def q_function(pool: ModePool, ref: AggState, cand: AggState) -> float:
    """EM surrogate objective: expected complete-data log likelihood of the
    candidate state under posteriors taken from the reference state."""
    total = 0.0
    for i in range(pool.size):
        r = posterior(pool.means[i], ref)
        for h in range(cand.weights.size):
            if r[h] <= 0.0:
                continue
            cov = cand.covs[h]
            det = cov[:, 0, 0] * cov[:, 1, 1] - cov[:, 0, 1] * cov[:, 1, 0]
            inv00 = cov[:, 1, 1] / det
            inv11 = cov[:, 0, 0] / det
            inv01 = -cov[:, 0, 1] / det
            diff = pool.means[i] - cand.means[h]
            quad = (inv00 * diff[:, 0] ** 2 + 2.0 * inv01 * diff[:, 0] * diff[:, 1]
                    + inv11 * diff[:, 1] ** 2)
            tr = (inv00 * pool.covs[i][:, 0, 0] + 2.0 * inv01 * pool.covs[i][:, 0, 1]
                  + inv11 * pool.covs[i][:, 1, 1])
            lw = math.log(cand.weights[h]) if cand.weights[h] > 0 else -np.inf
            ll = lw + float((-_LOG_2PI - 0.5 * np.log(det) - 0.5 * (quad + tr)).sum())
            total += pool.weights[i] * r[h] * ll
    return total


def aggregate(heads, m: int, tau: float = 2.0, max_iters: int = 25,
              tol: float = 1e-6) -> GaussianMixtureTrajectory:
    """Full reduction: pool -> greedy centroids -> EM refinement.

    Initial weights are proportional to the pool mass each centroid covers
    (components within tau assign to their nearest selected centroid), which
    starts EM close to the coverage solution.
    """
    pool = pool_union(heads)
    pool.validate()
    if m > pool.size:
        raise DomainError(f"m={m} exceeds pool size {pool.size}")
    sel = greedy_init(pool, m, tau)
    means = pool.means[sel].copy()
    covs = pool.covs[sel].copy()
    d = _distance_matrix(pool.means, pool.means[sel])  # (M', m)
    nearest = d.argmin(axis=1)
    q0 = np.zeros(m)
    for i in range(pool.size):
        if d[i, nearest[i]] <= tau:
            q0[nearest[i]] += pool.weights[i]
    if q0.sum() < 1e-12:
        q0[:] = 1.0 / m
    else:
        q0 = q0 / q0.sum()
    state = AggState(q0, means, covs)
    for _ in range(max_iters):
        new = em_iterate(pool, state)
        change = max(
            float(np.abs(new.weights - state.weights).max()),
            float(np.abs(new.means - state.means).max()),
            float(np.abs(new.covs - state.covs).max()),
        )
        state = new
        if change < tol:
            break
    covs = state.covs.copy()
    covs[..., 0, 0] += COV_JITTER
    covs[..., 1, 1] += COV_JITTER
    sx = np.sqrt(covs[..., 0, 0])
    sy = np.sqrt(covs[..., 1, 1])
    rho = covs[..., 0, 1] / (sx * sy)
    out = GaussianMixtureTrajectory(
        weights=state.weights / state.weights.sum(),
        means=state.means,
        sigma_x=sx,
        sigma_y=sy,
        rho=rho,
        headings=None,
        dt=pool.dt,
    )
    out.validate("aggregate")
    return out
