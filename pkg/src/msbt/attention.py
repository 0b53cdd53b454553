"""Multi-head attention and pre-norm transformer layers.

All functions accept inputs with arbitrary leading axes, so a stack of
independent parameter sets (leading axis P on every weight) can be applied
to a matching stack of token sequences in a single pass.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigurationError, DimensionError
from .params import ones, uniform, zeros


@dataclass
class TransformerLayerParams:
    ln1_g: Tensor
    ln1_b: Tensor
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    bo: Tensor
    ln2_g: Tensor
    ln2_b: Tensor
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    heads: int = 4

    @classmethod
    def init(cls, rng: np.random.Generator, d_model: int, heads: int, d_ff: int,
             stack: tuple[int, ...] = ()) -> "TransformerLayerParams":
        """Uniform(+-1/sqrt(fan_in)) weights, zero biases, unit LN gains.

        ``stack`` prepends independent-copy axes to every tensor.
        """
        if d_model % heads:
            raise ConfigurationError(f"d_model={d_model} not divisible by heads={heads}")
        s = tuple(stack)
        vec = lambda n: s + (1, n) if s else (n,)
        return cls(
            ln1_g=ones(vec(d_model)), ln1_b=zeros(vec(d_model)),
            # columns [h*dh:(h+1)*dh] of wq/wk/wv are head h's projection
            wq=uniform(rng, s + (d_model, d_model), d_model),
            wk=uniform(rng, s + (d_model, d_model), d_model),
            wv=uniform(rng, s + (d_model, d_model), d_model),
            wo=uniform(rng, s + (d_model, d_model), d_model),
            bo=zeros(vec(d_model)),
            ln2_g=ones(vec(d_model)), ln2_b=zeros(vec(d_model)),
            w1=uniform(rng, s + (d_model, d_ff), d_model), b1=zeros(vec(d_ff)),
            w2=uniform(rng, s + (d_ff, d_model), d_ff), b2=zeros(vec(d_model)),
            heads=heads,
        )

    @property
    def d_model(self) -> int:
        return self.wq.shape[-1]

    @property
    def stack_shape(self) -> tuple[int, ...]:
        return self.wq.shape[:-2]

    def select(self, i: int) -> "TransformerLayerParams":
        """Parameters of copy ``i`` along the leading stack axis (differentiable view)."""
        kw = {}
        for name in ("ln1_g", "ln1_b", "wq", "wk", "wv", "wo", "bo", "ln2_g", "ln2_b", "w1", "b1", "w2", "b2"):
            t = getattr(self, name)
            v = t[i]
            if name in ("ln1_g", "ln1_b", "bo", "ln2_g", "ln2_b", "b1", "b2"):
                v = v.reshape(v.shape[-1])
            kw[name] = v
        return TransformerLayerParams(heads=self.heads, **kw)


def _split_heads(x: Tensor, heads: int, keys: bool = False) -> Tensor:
    # (..., N, D) -> (..., H, N, dh), or (..., H, dh, N) for keys
    *lead, n, d = x.shape
    x = x.reshape(tuple(lead) + (n, heads, d // heads))
    k = len(lead)
    order = list(range(k)) + ([k + 1, k + 2, k] if keys else [k + 1, k, k + 2])
    return ad.transpose(x, order)


def attention_weights(xq: Tensor, xkv: Tensor, p: TransformerLayerParams) -> Tensor:
    """Per-head softmax attention matrix, shape (..., H, M, N)."""
    dh = p.d_model // p.heads
    q = ad.scale(_split_heads(ad.matmul(xq, p.wq), p.heads), 1.0 / math.sqrt(dh))
    kt = _split_heads(ad.matmul(xkv, p.wk), p.heads, keys=True)
    return ad.softmax(ad.matmul(q, kt), axis=-1)


def multi_head_attention(xq: Tensor, xkv: Tensor, p: TransformerLayerParams) -> Tensor:
    """Scaled dot-product attention of queries ``xq`` over keys/values ``xkv``."""
    return ad.attention(xq, xkv, p.wq, p.wk, p.wv, p.wo, p.bo, p.heads)


def feed_forward(x: Tensor, p: TransformerLayerParams) -> Tensor:
    return ad.linear(ad.gelu(ad.linear(x, p.w1, p.b1)), p.w2, p.b2)


def _check_width(x: Tensor, p: TransformerLayerParams, what: str) -> None:
    if x.ndim < 2 or x.shape[-1] != p.d_model:
        raise DimensionError(f"{what}: input shape {x.shape} does not match D_E={p.d_model}")
    if x.shape[-2] < 1:
        raise DimensionError(f"{what}: need at least one token")


def transformer_layer(z: Tensor, p: TransformerLayerParams) -> Tensor:
    """Pre-norm layer: z' = MSA(LN(z)) + z, out = FFN(LN(z')) + z'."""
    _check_width(z, p, "transformer_layer")
    h = ad.layernorm(z, p.ln1_g, p.ln1_b)
    z = multi_head_attention(h, h, p) + z
    return feed_forward(ad.layernorm(z, p.ln2_g, p.ln2_b), p) + z


def cross_transformer(x: Tensor, y: Tensor, p: TransformerLayerParams) -> Tensor:
    """Like ``transformer_layer`` but queries come from ``x``, keys/values from ``y``.

    The residual stream follows ``x``; both sides share the first layer norm.
    """
    _check_width(x, p, "cross_transformer(x)")
    _check_width(y, p, "cross_transformer(y)")
    hx = ad.layernorm(x, p.ln1_g, p.ln1_b)
    hy = ad.layernorm(y, p.ln1_g, p.ln1_b)
    z = multi_head_attention(hx, hy, p) + x
    return feed_forward(ad.layernorm(z, p.ln2_g, p.ln2_b), p) + z


def transformer_stack(z: Tensor, layers: list[TransformerLayerParams]) -> Tensor:
    for p in layers:
        z = transformer_layer(z, p)
    return z
