import math

import numpy as np
import pytest

from motionmix.autodiff import Value, backward
from motionmix.errors import DomainError, ValidationError
from motionmix.model import PredictionModel
from motionmix.predictor import GmmNodes, ModeNodes
from motionmix.trainer import (TrainConfig, collect_futures, hard_assignment,
                               kmeans_anchors, nll_loss, prepare_examples,
                               train)
from conftest import tiny_config
from oracles import gaussian_logpdf_2d, kmeans_inertia, seq_log_density


def make_nodes(means, sigma=1.0, rho=0.0, logits=None):
    """Hand-built graph mixture: means (M, T, 2), shared scalar sigma/rho."""
    means = np.asarray(means, dtype=np.float64)
    m_, t = means.shape[0], means.shape[1]
    logits = np.zeros(m_) if logits is None else np.asarray(logits, float)
    modes = []
    for i in range(m_):
        modes.append(ModeNodes(
            logit=Value(logits[i]),
            mean_x=Value(means[i, :, 0].copy()),
            mean_y=Value(means[i, :, 1].copy()),
            sigma_x=Value(np.full(t, sigma)),
            sigma_y=Value(np.full(t, sigma)),
            rho=Value(np.full(t, rho)),
        ))
    return GmmNodes(modes=modes, dt=0.2)


class TestHardAssignment:
    def test_matches_bruteforce(self, rng):
        for _ in range(50):
            means = rng.normal(size=(5, 7, 2))
            gt = rng.normal(size=(7, 2))
            d = np.linalg.norm(means - gt, axis=-1).mean(axis=1)
            assert hard_assignment(means, gt) == int(np.argmin(d))

    def test_tie_goes_low(self):
        means = np.zeros((3, 4, 2))
        assert hard_assignment(means, np.ones((4, 2))) == 0

    def test_valid_mask_changes_winner(self):
        means = np.zeros((2, 2, 2))
        means[0, 0] = (0.0, 0.0)   # perfect at step 0, bad at step 1
        means[0, 1] = (9.0, 9.0)
        means[1] = 1.0             # mediocre everywhere
        gt = np.array([[0.0, 0.0], [1.0, 1.0]])
        assert hard_assignment(means, gt) == 1
        assert hard_assignment(means, gt, valid=np.array([True, False])) == 0

    def test_all_invalid_rejected(self):
        with pytest.raises(DomainError):
            hard_assignment(np.zeros((2, 3, 2)), np.zeros((3, 2)),
                            valid=np.zeros(3, bool))

    def test_accepts_graph_nodes(self, rng):
        means = rng.normal(size=(4, 5, 2))
        nodes = make_nodes(means)
        gt = rng.normal(size=(5, 2))
        assert hard_assignment(nodes, gt) == hard_assignment(means, gt)


class TestNllLoss:
    def test_perfect_unit_mode_closed_form(self):
        """All residuals zero, sigma=1, rho=0: per-step density is 1/(2 pi),
        so the loss is log M + T log 2 pi under uniform weights."""
        t = 6
        gt = np.arange(2 * t, dtype=float).reshape(t, 2)
        nodes = make_nodes(np.stack([gt, gt + 5.0, gt - 5.0]))
        loss = nll_loss(nodes, gt, np.ones(t, bool), 0)
        assert float(loss.data) == pytest.approx(math.log(3) + t * math.log(2 * math.pi), rel=1e-12)

    def test_matches_gaussian_oracle(self, rng):
        t = 5
        means = rng.normal(size=(3, t, 2))
        gt = rng.normal(size=(t, 2))
        sx = np.exp(rng.normal(size=t) * 0.3)
        sy = np.exp(rng.normal(size=t) * 0.3)
        rho = np.tanh(rng.normal(size=t)) * 0.7
        logits = rng.normal(size=3)
        nodes = make_nodes(means, logits=logits)
        nodes.modes[1].sigma_x = Value(sx)
        nodes.modes[1].sigma_y = Value(sy)
        nodes.modes[1].rho = Value(rho)
        loss = nll_loss(nodes, gt, np.ones(t, bool), 1)
        log_q = logits[1] - np.log(np.exp(logits).sum())
        log_n = sum(gaussian_logpdf_2d(gt[i], means[1, i], sx[i], sy[i], rho[i])
                    for i in range(t))
        assert float(loss.data) == pytest.approx(-(log_q + log_n), rel=1e-10)

    def test_sigma_inflation_hurts_at_zero_residual(self):
        gt = np.zeros((4, 2))
        losses = []
        for s in (1.0, 2.0, 4.0):
            nodes = make_nodes(np.zeros((2, 4, 2)), sigma=s)
            losses.append(float(nll_loss(nodes, gt, np.ones(4, bool), 0).data))
        assert losses[0] < losses[1] < losses[2]

    def test_invalid_steps_do_not_count(self):
        gt = np.zeros((3, 2))
        gt[2] = 1e6  # garbage on the masked step
        nodes = make_nodes(np.zeros((1, 3, 2)))
        loss = nll_loss(nodes, gt, np.array([True, True, False]), 0)
        assert float(loss.data) == pytest.approx(2 * math.log(2 * math.pi), rel=1e-12)

    def test_out_of_range_mode(self):
        nodes = make_nodes(np.zeros((2, 3, 2)))
        with pytest.raises(DomainError):
            nll_loss(nodes, np.zeros((3, 2)), np.ones(3, bool), 5)

    def test_classification_grad_touches_all_logits(self):
        nodes = make_nodes(np.zeros((3, 4, 2)), logits=[0.1, -0.2, 0.3])
        loss = nll_loss(nodes, np.ones((4, 2)), np.ones(4, bool), 1)
        backward(loss)
        grads = [float(m.logit.grad) for m in nodes.modes]
        assert all(abs(g) > 0 for g in grads)
        # softmax gradient sums to zero across the logits
        assert sum(grads) == pytest.approx(0.0, abs=1e-12)

    def test_regression_grad_only_assigned(self):
        nodes = make_nodes(np.zeros((3, 4, 2)))
        loss = nll_loss(nodes, np.ones((4, 2)), np.ones(4, bool), 1)
        backward(loss)
        assert np.all(nodes.modes[1].mean_x.grad != 0)
        assert np.all(nodes.modes[0].mean_x.grad == 0)
        assert np.all(nodes.modes[2].mean_x.grad == 0)

    def test_seq_density_oracle_full_cov(self, rng):
        """Cross-check the step product against a dense-covariance oracle."""
        t = 4
        means = rng.normal(size=(1, t, 2))
        gt = rng.normal(size=(t, 2))
        nodes = make_nodes(means, sigma=1.3, rho=0.4)
        loss = nll_loss(nodes, gt, np.ones(t, bool), 0)
        covs = np.array([[[1.3 ** 2, 0.4 * 1.3 * 1.3],
                          [0.4 * 1.3 * 1.3, 1.3 ** 2]]] * t)
        expect = seq_log_density(gt, means[0], covs)
        assert float(loss.data) == pytest.approx(-expect, rel=1e-10)


class TestPrepareExamples:
    def test_agent_frame_and_split(self, scenario_batch):
        examples = prepare_examples(scenario_batch)
        assert len(examples) == sum(len(s.target_ids) for s in scenario_batch)
        for ex in examples:
            tr = ex.scenario.track(ex.agent_id)
            cur = tr.states[ex.scenario.current_index]
            assert abs(cur[1]) < 1e-9 and abs(cur[2]) < 1e-9
            assert abs(cur[3]) < 1e-9
            assert ex.gt.shape == (ex.scenario.future_steps, 2)
            assert ex.gt_valid.shape == (ex.scenario.future_steps,)


class TestTrainLoop:
    def _examples(self, n=4):
        from motionmix.data_io import SyntheticConfig, generate_synthetic
        scns = generate_synthetic(SyntheticConfig(
            template="lane_follow", count=n, seed=3,
            history_steps=4, future_steps=6))
        return prepare_examples(scns)

    def _config(self, **over):
        base = dict(lr0=0.005, batch=2, steps=6, seed=0, ensemble_heads=1,
                    modes_per_head=3, bag_prob=1.0, decay_every_epochs=10 ** 6)
        base.update(over)
        return TrainConfig(**base)

    def test_loss_decreases(self):
        examples = self._examples()
        model = PredictionModel.build(tiny_config())
        curve = train(model, examples, self._config(steps=40))
        first = np.mean([l for _, l, _ in curve[:5]])
        last = np.mean([l for _, l, _ in curve[-5:]])
        assert last < first

    def test_deterministic_params(self):
        examples = self._examples()
        vecs = []
        for _ in range(2):
            model = PredictionModel.build(tiny_config())
            train(model, examples, self._config(steps=8))
            vecs.append(model.bundle.get_vector())
        np.testing.assert_array_equal(vecs[0], vecs[1])

    def test_lr_schedule_halves_by_epoch(self):
        examples = self._examples(n=4)
        model = PredictionModel.build(tiny_config())
        cfg = self._config(steps=6, batch=2, decay_every_epochs=1)
        curve = train(model, examples, cfg)
        # 4 examples / batch 2 = 2 steps per epoch
        lrs = [lr for _, _, lr in curve]
        assert lrs == [cfg.lr0, cfg.lr0, cfg.lr0 / 2, cfg.lr0 / 2,
                       cfg.lr0 / 4, cfg.lr0 / 4]

    def test_head_count_mismatch(self):
        examples = self._examples()
        model = PredictionModel.build(tiny_config())
        with pytest.raises(ValidationError):
            train(model, examples, self._config(ensemble_heads=2))

    def test_mode_count_mismatch(self):
        examples = self._examples()
        model = PredictionModel.build(tiny_config())
        with pytest.raises(ValidationError):
            train(model, examples, self._config(modes_per_head=5))

    def test_empty_dataset(self):
        model = PredictionModel.build(tiny_config())
        with pytest.raises(DomainError):
            train(model, [], self._config())

    def test_bad_bag_prob(self):
        with pytest.raises(ValidationError):
            self._config(bag_prob=0.0)

    def test_bagging_rate(self):
        """With batch=1 and one head, a step contributes a curve entry iff
        the head was drawn, so the curve length estimates bag_prob."""
        examples = self._examples(n=2)
        model = PredictionModel.build(tiny_config())
        steps = 240
        curve = train(model, examples, self._config(
            steps=steps, batch=1, bag_prob=0.5, lr0=1e-4))
        rate = len(curve) / steps
        sigma = math.sqrt(0.25 / steps)
        assert abs(rate - 0.5) < 4 * sigma

    def test_bagging_deterministic(self):
        examples = self._examples(n=2)
        lens = []
        for _ in range(2):
            model = PredictionModel.build(tiny_config())
            curve = train(model, examples, self._config(
                steps=30, batch=1, bag_prob=0.5, lr0=1e-4))
            lens.append([s for s, _, _ in curve])
        assert lens[0] == lens[1]


class TestKmeansAnchors:
    def test_recovers_separated_clusters(self, rng):
        a = rng.normal(size=(20, 4, 2)) * 0.01
        b = rng.normal(size=(20, 4, 2)) * 0.01 + 100.0
        trajs = np.concatenate([a, b])
        anchors = kmeans_anchors(trajs, 2, seed=1)
        finals = sorted(anchors[:, 0, 0])
        assert abs(finals[0] - 0.0) < 1.0
        assert abs(finals[1] - 100.0) < 1.0

    def test_inertia_monotone(self, rng):
        trajs = rng.normal(size=(60, 5, 2))
        _, inertias = kmeans_anchors(trajs, 4, seed=2, return_inertia=True)
        diffs = np.diff(inertias)
        assert np.all(diffs <= 1e-9)

    def test_final_inertia_matches_oracle(self, rng):
        trajs = rng.normal(size=(40, 3, 2))
        anchors, inertias = kmeans_anchors(trajs, 3, seed=0, return_inertia=True)
        # one extra assignment pass over the returned anchors
        oracle = kmeans_inertia(trajs.reshape(40, -1), anchors.reshape(3, -1))
        assert oracle <= inertias[-1] + 1e-9

    def test_k_equals_n_zero_inertia(self, rng):
        trajs = rng.normal(size=(5, 3, 2))
        anchors, inertias = kmeans_anchors(trajs, 5, iters=200, seed=0,
                                           return_inertia=True)
        assert inertias[-1] == pytest.approx(0.0, abs=1e-18)
        got = {tuple(np.round(a.ravel(), 9)) for a in anchors}
        want = {tuple(np.round(t.ravel(), 9)) for t in trajs}
        assert got == want

    def test_duplicate_points_still_returns_k(self):
        trajs = np.zeros((10, 2, 2))
        trajs[5:] = 1.0
        anchors = kmeans_anchors(trajs, 3, seed=0)
        assert anchors.shape == (3, 2, 2)
        assert np.isfinite(anchors).all()

    def test_k_too_large(self, rng):
        with pytest.raises(DomainError):
            kmeans_anchors(rng.normal(size=(3, 2, 2)), 4)

    def test_bad_shape(self):
        with pytest.raises(DomainError):
            kmeans_anchors(np.zeros((3, 4)), 2)

    def test_deterministic(self, rng):
        trajs = rng.normal(size=(30, 4, 2))
        a = kmeans_anchors(trajs, 3, seed=7)
        b = kmeans_anchors(trajs, 3, seed=7)
        np.testing.assert_array_equal(a, b)


class TestCollectFutures:
    def test_filters_partial(self, scenario_batch):
        examples = prepare_examples(scenario_batch)
        examples[0].gt_valid[2] = False
        futs = collect_futures(examples)
        assert futs.shape[0] == len(examples) - 1

    def test_empty_rejected(self, scenario_batch):
        examples = prepare_examples(scenario_batch)
        for ex in examples:
            ex.gt_valid[:] = False
        with pytest.raises(DomainError):
            collect_futures(examples)
