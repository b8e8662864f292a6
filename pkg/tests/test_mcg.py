"""Gating-block semantics: pooling invariances, skips, numpy cross-check."""

import numpy as np
import pytest

from motionmix.autodiff import Value, backward, vmean
from motionmix.errors import DimensionError, DomainError
from motionmix.mcg import cg_forward, init_mcg_params, mcg_forward
from motionmix.params import ParamBundle
from oracles import cg_forward_np, finite_difference


def build(rng, element_in=6, width=8, depth=2, context_in=None, pooling="max"):
    bundle = ParamBundle()
    params = init_mcg_params(bundle, "g.", element_in, width, depth, rng,
                             context_in=context_in, pooling=pooling)
    return bundle, params


def random_set(rng, n, dim):
    return [Value(rng.normal(size=dim)) for _ in range(n)]


class TestSingleBlock:
    def test_matches_numpy_oracle(self, rng):
        bundle, params = build(rng, element_in=5, width=7, depth=1, context_in=4)
        elems = random_set(rng, 3, 5)
        ctx = Value(rng.normal(size=4))
        gated, pooled = mcg_forward(elems, ctx, params)
        ew = [bundle["g.blk0.elem.W0"].data, bundle["g.blk0.elem.W1"].data]
        eb = [bundle["g.blk0.elem.b0"].data, bundle["g.blk0.elem.b1"].data]
        cw = [bundle["g.blk0.ctx.W0"].data, bundle["g.blk0.ctx.W1"].data]
        cb = [bundle["g.blk0.ctx.b0"].data, bundle["g.blk0.ctx.b1"].data]
        ref_gated, ref_pooled = cg_forward_np([e.data for e in elems], ctx.data,
                                              ew, eb, cw, cb)
        for g, r in zip(gated, ref_gated):
            np.testing.assert_allclose(g.data, r, atol=1e-12)
        np.testing.assert_allclose(pooled.data, ref_pooled, atol=1e-12)

    def test_missing_context_gates_with_ones(self, rng):
        bundle, params = build(rng, element_in=8, width=8, depth=1, context_in=None)
        elems = random_set(rng, 4, 8)
        gated, _ = mcg_forward(elems, None, params)
        block = params.blocks[0]
        embedded, _ = cg_forward(elems, None, block)
        for g, e in zip(gated, embedded):
            np.testing.assert_array_equal(g.data, e.data)

    def test_empty_set_rejected(self, rng):
        _, params = build(rng)
        with pytest.raises(DomainError):
            mcg_forward([], None, params)

    def test_mixed_widths_rejected(self, rng):
        _, params = build(rng, element_in=6)
        with pytest.raises(DimensionError):
            mcg_forward([Value(np.ones(6)), Value(np.ones(5))], None, params)


class TestPoolingInvariance:
    def test_max_pool_permutation_invariant_bitexact(self, rng):
        bundle, params = build(rng, element_in=6, width=8, depth=3, context_in=5)
        elems = random_set(rng, 5, 6)
        ctx = Value(rng.normal(size=5))
        _, pooled = mcg_forward(elems, ctx, params)
        perm = rng.permutation(5)
        _, pooled_p = mcg_forward([elems[i] for i in perm], ctx, params)
        assert np.array_equal(pooled.data, pooled_p.data)  # bit-exact

    def test_element_outputs_permutation_equivariant(self, rng):
        _, params = build(rng, element_in=6, width=8, depth=2, context_in=5)
        rng2 = np.random.default_rng(7)
        elems = random_set(rng2, 4, 6)
        ctx = Value(rng2.normal(size=5))
        gated, _ = mcg_forward(elems, ctx, params)
        perm = [2, 0, 3, 1]
        gated_p, _ = mcg_forward([elems[i] for i in perm], ctx, params)
        for out_pos, src in enumerate(perm):
            assert np.array_equal(gated_p[out_pos].data, gated[src].data)

    def test_mean_pool_invariant_to_tolerance(self, rng):
        _, params = build(rng, element_in=6, width=8, depth=2, context_in=5,
                          pooling="mean")
        elems = random_set(rng, 6, 6)
        ctx = Value(rng.normal(size=5))
        _, pooled = mcg_forward(elems, ctx, params)
        perm = rng.permutation(6)
        _, pooled_p = mcg_forward([elems[i] for i in perm], ctx, params)
        np.testing.assert_allclose(pooled_p.data, pooled.data, rtol=1e-12)

    def test_duplicating_max_pool_elements_is_noop(self, rng):
        """max pooling ignores multiplicity of identical elements."""
        _, params = build(rng, element_in=6, width=8, depth=1, context_in=None)
        elems = random_set(rng, 3, 6)
        _, pooled = mcg_forward(elems, None, params)
        _, pooled_dup = mcg_forward(elems + [elems[0]], None, params)
        assert np.array_equal(pooled.data, pooled_dup.data)


class TestStacking:
    def test_running_average_feeds_block1(self, rng):
        """With matching widths block 1 sees mean(raw input, block-0 output)."""
        bundle, params = build(rng, element_in=8, width=8, depth=2, context_in=8)
        elems = random_set(rng, 3, 8)
        ctx = Value(rng.normal(size=8))
        gated, pooled = mcg_forward(elems, ctx, params)

        g0, c0 = cg_forward(elems, ctx, params.blocks[0])
        s_in = [vmean([elems[i], g0[i]]) for i in range(3)]
        c_in = vmean([ctx, c0])
        g1, c1 = cg_forward(s_in, c_in, params.blocks[1])
        for a, b in zip(gated, g1):
            np.testing.assert_array_equal(a.data, b.data)
        np.testing.assert_array_equal(pooled.data, c1.data)

    def test_raw_input_excluded_on_width_mismatch(self, rng):
        """element_in != width: the skip starts at block-0's output."""
        _, params = build(rng, element_in=5, width=8, depth=2, context_in=8)
        elems = random_set(rng, 3, 5)
        ctx = Value(rng.normal(size=8))
        gated, _ = mcg_forward(elems, ctx, params)

        g0, c0 = cg_forward(elems, ctx, params.blocks[0])
        c_in = vmean([ctx, c0])
        g1, _ = cg_forward(g0, c_in, params.blocks[1])
        for a, b in zip(gated, g1):
            np.testing.assert_array_equal(a.data, b.data)

    def test_depth_zero_rejected(self, rng):
        bundle = ParamBundle()
        with pytest.raises(DomainError):
            init_mcg_params(bundle, "g.", 4, 4, 0, rng)


class TestGradients:
    def test_fd_through_stack(self, rng):
        bundle, params = build(rng, element_in=4, width=5, depth=2, context_in=3)
        elems_np = [rng.normal(size=4) for _ in range(3)]
        ctx_np = rng.normal(size=3)

        def loss_for(vec):
            bundle.set_vector(vec)
            _, pooled = mcg_forward([Value(e) for e in elems_np], Value(ctx_np), params)
            return float((pooled * pooled).sum().data)

        base = bundle.get_vector().copy()
        bundle.zero_grad()
        _, pooled = mcg_forward([Value(e) for e in elems_np], Value(ctx_np), params)
        backward((pooled * pooled).sum())
        grad = np.concatenate([bundle[n].grad.reshape(-1) for n in bundle.names()])
        num = finite_difference(loss_for, base, 1e-6)
        bundle.set_vector(base)
        np.testing.assert_allclose(grad, num, rtol=2e-4, atol=1e-7)
