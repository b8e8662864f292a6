"""Training: hard-assignment NLL, bagged ensemble heads, k-means anchors.

The loss for one example and head picks the mode whose mean trajectory is
closest to the groundtruth (mean per-step Euclidean distance, ties to the
lowest index) and maximizes

    log q_assigned + sum_t log N(s_t - mu_assigned^t, Sigma_assigned^t)

over valid steps.  The classification term backpropagates into every logit
through the softmax; the regression term only into the assigned mode.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import Value, backward, logsumexp, vsum
from .errors import DomainError, NumericError, ValidationError
from .model import PredictionModel
from .params import AdamState, adam_step, clip_grads_global_norm
from .predictor import GaussianMixtureTrajectory, GmmNodes
from .scene import (H_COL, VALID_COL, X_COL, Y_COL, Scenario, to_agent_frame)

_LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class TrainConfig:
    lr0: float = 0.0002
    batch: int = 64
    decay: float = 0.5
    decay_every_epochs: int = 2
    steps: int = 5000
    seed: int = 0
    ensemble_heads: int = 5   # E; must match the model
    modes_per_head: int = 64  # L; must match the model
    bag_prob: float = 0.5

    def __post_init__(self):
        if not (0.0 < self.bag_prob <= 1.0):
            raise ValidationError("bag_prob must be in (0, 1]")
        if self.ensemble_heads < 1 or self.modes_per_head < 1:
            raise ValidationError("ensemble_heads and modes_per_head must be >= 1")

    def lr_at_epoch(self, epoch: int) -> float:
        return self.lr0 * self.decay ** (epoch // self.decay_every_epochs)


@dataclass
class Example:
    """One training/eval example: an agent-framed scenario plus its future."""

    scenario: Scenario   # already in the agent frame
    agent_id: str
    gt: np.ndarray       # (T, 2)
    gt_valid: np.ndarray
    gt_heading: np.ndarray
    source: str = ""     # provenance label, e.g. the scenario file name


def prepare_examples(scenarios) -> list:
    """Expand scenarios into per-target examples, pre-transformed to each
    target's frame with the future split out."""
    out = []
    for s in scenarios:
        for tid in s.target_ids:
            s_af = to_agent_frame(s, tid)
            tr = s_af.track(tid)
            future = tr.states[s.current_index + 1 :]
            out.append(Example(
                scenario=s_af,
                agent_id=tid,
                gt=future[:, X_COL : Y_COL + 1].copy(),
                gt_valid=future[:, VALID_COL] > 0.5,
                gt_heading=future[:, H_COL].copy(),
                source=str(s.meta.get("name", "")),
            ))
    return out


def hard_assignment(gmm, gt: np.ndarray, valid: np.ndarray | None = None) -> int:
    """Index of the mode with smallest mean per-step distance to the
    groundtruth over valid steps; ties go to the lowest index."""
    if isinstance(gmm, GmmNodes):
        means = gmm.means_array()
    elif isinstance(gmm, GaussianMixtureTrajectory):
        means = gmm.means
    else:
        means = np.asarray(gmm, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    mask = np.ones(gt.shape[0], dtype=bool) if valid is None else np.asarray(valid, bool)
    if not mask.any():
        raise DomainError("hard_assignment needs at least one valid step")
    d = np.linalg.norm(means[:, mask, :] - gt[None, mask, :], axis=-1).mean(axis=1)
    return int(np.argmin(d))


def nll_loss(nodes: GmmNodes, gt: np.ndarray, valid: np.ndarray, assigned: int) -> Value:
    """Negative log likelihood of the groundtruth under the assigned mode."""
    if not 0 <= assigned < len(nodes.modes):
        raise DomainError(f"assigned mode {assigned} out of range")
    logits = nodes.logits()
    log_q = logits[assigned] - logsumexp(logits)
    m = nodes.modes[assigned]
    mask = Value(np.asarray(valid, dtype=np.float64))
    dx = Value(gt[:, 0]) - m.mean_x
    dy = Value(gt[:, 1]) - m.mean_y
    one_m = 1.0 - m.rho * m.rho
    z = (dx * dx) / (m.sigma_x * m.sigma_x) + (dy * dy) / (m.sigma_y * m.sigma_y) \
        - (m.rho * dx * dy) * 2.0 / (m.sigma_x * m.sigma_y)
    log_n = (m.sigma_x * m.sigma_y).log() * -1.0 - one_m.log() * 0.5 \
        - (z / one_m) * 0.5 - _LOG_2PI
    return -(log_q + (log_n * mask).sum())


def _wrapped_diff(pred: Value, target: np.ndarray) -> Value:
    """pred - target wrapped to (-pi, pi]; the wrap offset is a constant so
    gradients pass straight through."""
    diff = pred - Value(target)
    k = np.round(diff.data / (2.0 * math.pi))
    return diff - Value(2.0 * math.pi * k)


def example_loss(model: PredictionModel, ex: Example, head_indices) -> list:
    """Per-head loss terms (list of scalar Values) for one example."""
    cfg = model.config
    heads = model.forward_nodes(ex.scenario, ex.agent_id, head_indices)
    terms = []
    for nodes in heads:
        a = hard_assignment(nodes, ex.gt, ex.gt_valid)
        loss = nll_loss(nodes, ex.gt, ex.gt_valid, a)
        mode = nodes.modes[a]
        if mode.heading is not None and cfg.heading_aux_weight > 0.0:
            d = _wrapped_diff(mode.heading, ex.gt_heading)
            mask = Value(np.asarray(ex.gt_valid, dtype=np.float64))
            loss = loss + (d * d * mask).sum() * cfg.heading_aux_weight
        if mode.aux_penalty is not None and cfg.poly_const_weight > 0.0:
            pen = vsum([m.aux_penalty for m in nodes.modes]) * (1.0 / len(nodes.modes))
            loss = loss + pen * cfg.poly_const_weight
        terms.append(loss)
    return terms


def train(model: PredictionModel, examples, config: TrainConfig,
          grad_clip: float = 10.0):
    """Adam over shuffled minibatches with per-example/per-head bagging.

    Returns the loss curve as a list of (step, loss, lr).  Deterministic for
    a fixed seed.  Raises NumericError if the loss diverges.
    """
    if not examples:
        raise DomainError("empty dataset")
    if config.ensemble_heads != model.config.n_heads:
        raise ValidationError(
            f"config E={config.ensemble_heads} but model has {model.config.n_heads} heads")
    if config.modes_per_head != model.config.modes_per_head:
        raise ValidationError(
            f"config L={config.modes_per_head} but model has {model.config.modes_per_head}")
    rng = np.random.default_rng(config.seed)
    n = len(examples)
    e_heads = model.config.n_heads
    steps_per_epoch = max(1, math.ceil(n / config.batch))
    adam = AdamState()
    curve = []
    order = rng.permutation(n)
    cursor = 0
    for step in range(config.steps):
        epoch = step // steps_per_epoch
        lr = config.lr_at_epoch(epoch)
        terms = []
        for _ in range(min(config.batch, n)):
            if cursor >= n:
                order = rng.permutation(n)
                cursor = 0
            ex = examples[order[cursor]]
            cursor += 1
            mask = rng.random(e_heads) < config.bag_prob
            active = [h for h in range(e_heads) if mask[h]]
            if not active:
                continue
            terms.extend(example_loss(model, ex, active))
        if not terms:
            continue
        total = vsum(terms) * (1.0 / len(terms))
        loss_val = float(total.data)
        if not math.isfinite(loss_val):
            raise NumericError(
                f"training diverged at step {step}: loss={loss_val} (lr={lr})")
        try:
            backward(total)
        except NumericError as exc:
            raise NumericError(f"training diverged at step {step}: {exc}") from exc
        clip_grads_global_norm(model.bundle, grad_clip)
        adam_step(model.bundle, adam, lr)
        model.bundle.zero_grad()
        curve.append((step, loss_val, lr))
    return curve


def write_loss_csv(curve, path):
    with open(path, "w") as f:
        f.write("step,loss,lr\n")
        for step, loss, lr in curve:
            f.write(f"{step},{loss!r},{lr!r}\n")


# ---------------------------------------------------------------------------
# static anchors
# ---------------------------------------------------------------------------


def kmeans_anchors(trajectories, k: int, iters: int = 50, seed: int = 0,
                   return_inertia: bool = False):
    """Lloyd's algorithm over flattened future trajectories with k-means++
    seeding.  Empty clusters are re-seeded from the point farthest from its
    nearest centroid.  Returns (k, T, 2) anchor trajectories."""
    trajs = np.asarray(trajectories, dtype=np.float64)
    if trajs.ndim != 3 or trajs.shape[2] != 2:
        raise DomainError(f"expected (N, T, 2) trajectories, got {trajs.shape}")
    n, t, _ = trajs.shape
    if k > n:
        raise DomainError(f"k={k} exceeds dataset size {n}")
    pts = trajs.reshape(n, 2 * t)
    rng = np.random.default_rng(seed)

    # k-means++ seeding
    centers = np.empty((k, pts.shape[1]))
    centers[0] = pts[rng.integers(n)]
    d2 = ((pts - centers[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0:
            centers[j] = pts[rng.integers(n)]
        else:
            centers[j] = pts[rng.choice(n, p=d2 / total)]
        d2 = np.minimum(d2, ((pts - centers[j]) ** 2).sum(axis=1))

    inertias = []
    for _ in range(iters):
        dist = ((pts[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        labels = dist.argmin(axis=1)
        inertias.append(float(dist[np.arange(n), labels].sum()))
        new_centers = centers.copy()
        farthest = iter(np.argsort(-dist.min(axis=1), kind="stable"))
        for j in range(k):
            sel = labels == j
            if sel.any():
                new_centers[j] = pts[sel].mean(axis=0)
            else:
                new_centers[j] = pts[next(farthest)]
        if np.allclose(new_centers, centers, atol=0.0, rtol=0.0):
            break
        centers = new_centers
    anchors = centers.reshape(k, t, 2)
    if return_inertia:
        return anchors, inertias
    return anchors


def collect_futures(examples) -> np.ndarray:
    """(N, T, 2) fully valid futures from prepared examples (for k-means)."""
    futs = [ex.gt for ex in examples if ex.gt_valid.all()]
    if not futs:
        raise DomainError("no fully valid futures in the dataset")
    return np.stack(futs)
