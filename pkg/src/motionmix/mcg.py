"""Context-gated set encoding.

One gating block embeds each set element and a context vector with small MLPs,
multiplies the two elementwise, and pools the gated elements back into a new
context:

    s'_i = MLP(s_i) * MLP(c)        c' = pool_i(s'_i)

Stacking N blocks uses running averages as the skip connection: block k
consumes the mean of all element (resp. context) layers produced so far, the
raw input included whenever its width matches the block width.  With the
context absent, the first block gates against an all-ones vector.

The context output is permutation-invariant in the elements and the element
outputs are permutation-equivariant; tests enforce both.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Value, mlp_forward, vmax, vmean
from .errors import DimensionError, DomainError
from .params import ParamBundle, init_mlp_params, uniform_init

POOLINGS = ("max", "mean")


@dataclass
class CGBlock:
    """Parameters of a single gating block (views into a ParamBundle)."""

    bundle: ParamBundle
    elem_prefix: str
    elem_sizes: list
    ctx_prefix: str | None  # None -> identity context embedding
    ctx_sizes: list | None
    pooling: str = "max"
    activation: str = "relu"


@dataclass
class MCGParams:
    """A stack of gating blocks sharing one width."""

    blocks: tuple
    width: int
    element_in: int
    context_in: int | None


def _pool(gated, pooling: str) -> Value:
    if pooling == "max":
        return vmax(gated)
    if pooling == "mean":
        return vmean(gated)
    raise DomainError(f"unknown pooling {pooling!r}")


def cg_forward(elements, context, block: CGBlock):
    """One gating block; returns (gated elements, pooled context).

    ``context=None`` gates against an implicit all-ones vector.
    """
    if not elements:
        raise DomainError("cg_forward on an empty element set")
    width = block.elem_sizes[-1]
    embedded = [
        mlp_forward(s, block.bundle, block.elem_sizes, block.activation, block.elem_prefix)
        for s in elements
    ]
    if context is None:
        ctx = None
    elif block.ctx_prefix is None:
        ctx = context  # identity context embedding
    else:
        ctx = mlp_forward(context, block.bundle, block.ctx_sizes, block.activation,
                          block.ctx_prefix)
    if ctx is not None and ctx.data.size != width:
        raise DimensionError(
            f"context width {ctx.data.size} != element width {width}; gating needs equal widths"
        )
    gated = embedded if ctx is None else [e * ctx for e in embedded]
    return gated, _pool(gated, block.pooling)


def init_mcg_params(bundle: ParamBundle, prefix: str, element_in: int, width: int,
                    depth: int, rng, context_in: int | None = None,
                    hidden_layers: int = 2, pooling: str = "max",
                    activation: str = "relu", elem_w_init=uniform_init) -> MCGParams:
    """Create parameters for a depth-N stack.

    ``context_in=None`` builds identity context blocks: the stack is then
    called either with no context (all-ones gate in the first block) or with a
    width-sized context used as-is.  ``elem_w_init`` selects the weight
    initialiser of the element MLPs (the path that must keep set elements
    distinguishable); context blocks always use the default.
    """
    if depth < 1:
        raise DomainError("mcg depth must be >= 1")
    if pooling not in POOLINGS:
        raise DomainError(f"unknown pooling {pooling!r}")
    blocks = []
    for k in range(depth):
        e_in = element_in if k == 0 else width
        e_sizes = [e_in] + [width] * hidden_layers
        init_mlp_params(bundle, f"{prefix}blk{k}.elem.", e_sizes, rng,
                        w_init=elem_w_init)
        if context_in is None:
            c_prefix, c_sizes = None, None
        else:
            c_in = context_in if k == 0 else width
            c_sizes = [c_in] + [width] * hidden_layers
            c_prefix = f"{prefix}blk{k}.ctx."
            init_mlp_params(bundle, c_prefix, c_sizes, rng)
        blocks.append(CGBlock(bundle, f"{prefix}blk{k}.elem.", e_sizes, c_prefix, c_sizes,
                              pooling, activation))
    return MCGParams(tuple(blocks), width, element_in, context_in)


def mcg_forward(elements, context, params: MCGParams):
    """Run the full stack; returns (final gated elements, final context)."""
    if not elements:
        raise DomainError("mcg_forward on an empty element set")
    n = len(elements)
    width = params.width
    for s in elements:
        if s.data.ndim != 1 or s.data.size != elements[0].data.size:
            raise DimensionError("set elements must be vectors of one width")

    # running-average skips include the raw input only when widths line up
    s_layers = [list(elements)] if elements[0].data.size == width else []
    if context is None:
        c_layers = [Value(np.ones(width))]
    elif context.data.size == width:
        c_layers = [context]
    else:
        c_layers = []

    out_s, out_c = list(elements), context
    for k, block in enumerate(params.blocks):
        if s_layers:
            s_in = [vmean([layer[i] for layer in s_layers]) for i in range(n)]
        elif k == 0:
            s_in = list(elements)
        else:  # unreachable: every block output has the stack width
            raise DimensionError("element running average lost its width")
        if c_layers:
            c_in = vmean(c_layers)
        else:
            c_in = context if k == 0 else None
        out_s, out_c = cg_forward(s_in, c_in, block)
        s_layers.append(out_s)
        c_layers.append(out_c)
    return out_s, out_c
