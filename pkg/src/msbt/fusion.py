"""Multi-scale bottleneck fusion of modality pairs.

For an ordered pair (a, b) each layer l runs

    [Z^a_{l+1}, refined_l] = Transformer([Z^a_l || tokens_l])
    [Z^b_{l+1}, _]         = Transformer([Z^b_l || refined_l])
    tokens_{l+1}           = CrossTransformer(fresh_{l+1}, refined_l)

with the token count halving from layer to layer. Z^b after the last layer
is the fused feature Z^{ab}; ``refined`` of the last layer is kept for the
weighting head.

Parameters for all ordered pairs are stored stacked along a leading pair
axis so that every pair is fused in one batched pass.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .attention import TransformerLayerParams, cross_transformer, transformer_layer
from .autodiff import Tensor
from .errors import ConfigurationError, DimensionError


def token_schedule(n1: int, layers: int) -> list[int]:
    """Halving schedule [n1, n1 // 2, ...] of length ``layers``."""
    if n1 < 1 or layers < 1:
        raise ConfigurationError(f"token schedule needs n1 >= 1 and layers >= 1 (got {n1}, {layers})")
    sched = [n1]
    for layer in range(2, layers + 1):
        n = sched[-1] // 2
        if n < 1:
            raise ConfigurationError(
                f"bottleneck schedule {sched + [n]} reaches 0 tokens at layer {layer} "
                f"(n1={n1}, layers={layers})")
        sched.append(n)
    return sched


def fixed_schedule(n: int, layers: int) -> list[int]:
    if n < 1:
        raise ConfigurationError(f"fixed token count must be >= 1, got {n}")
    return [n] * layers


@dataclass
class MSBTParams:
    condense_a: list[TransformerLayerParams]
    condense_b: list[TransformerLayerParams]
    cross: list[TransformerLayerParams]       # empty when the cross-transformer is disabled
    tokens_init: Tensor
    fresh_tokens: list[Tensor]                # tokens entering layers 2..L_M

    @classmethod
    def init(cls, rng: np.random.Generator, d_model: int, heads: int, d_ff: int, schedule: list[int],
             cross_transformer: bool = True, token_std: float = 0.15,
             stack: tuple[int, ...] = ()) -> "MSBTParams":
        s = tuple(stack)
        n_layers = len(schedule)

        def tokens(n):
            return Tensor(rng.normal(0.0, token_std, size=s + (n, d_model)), requires_grad=True)

        layer = lambda: TransformerLayerParams.init(rng, d_model, heads, d_ff, stack=s)
        condense_a = [layer() for _ in range(n_layers)]
        condense_b = [layer() for _ in range(n_layers)]
        cross = [layer() for _ in range(n_layers - 1)] if cross_transformer else []
        return cls(condense_a, condense_b, cross, tokens(schedule[0]), [tokens(n) for n in schedule[1:]])

    @property
    def schedule(self) -> list[int]:
        return [self.tokens_init.shape[-2]] + [t.shape[-2] for t in self.fresh_tokens]

    @property
    def uses_cross_transformer(self) -> bool:
        return bool(self.cross)

    def select(self, i: int) -> "MSBTParams":
        """Parameters of the i-th ordered pair from a stacked parameter set."""
        return MSBTParams(
            [p.select(i) for p in self.condense_a],
            [p.select(i) for p in self.condense_b],
            [p.select(i) for p in self.cross],
            self.tokens_init[i],
            [t[i] for t in self.fresh_tokens],
        )


@dataclass
class BottleneckState:
    tokens_per_layer: list[Tensor]
    schedule: list[int]
    final_tokens: Tensor


@dataclass
class FusedPairSet:
    """Fused features for every ordered pair, kept as (P, T, D) / (P, n, D) stacks."""
    pairs: list[tuple[str, str]]
    fused_stack: Tensor
    final_stack: Tensor
    state: BottleneckState | None = field(default=None, repr=False)

    def __len__(self) -> int:
        return len(self.pairs)

    @property
    def fused(self) -> dict[tuple[str, str], Tensor]:
        return {p: self.fused_stack[i] for i, p in enumerate(self.pairs)}

    @property
    def final_bottlenecks(self) -> dict[tuple[str, str], Tensor]:
        return {p: self.final_stack[i] for i, p in enumerate(self.pairs)}


def _fuse(za: Tensor, zb: Tensor, params: MSBTParams) -> tuple[Tensor, Tensor, BottleneckState]:
    t = za.shape[-2]
    if zb.shape != za.shape:
        raise DimensionError(f"fuse: modality features differ in shape {za.shape} vs {zb.shape}")
    n_layers = len(params.condense_a)
    if params.schedule[0] >= t:
        warnings.warn(f"bottleneck tokens ({params.schedule[0]}) >= snippets ({t}); "
                      "bottleneck is not narrower than the sequence", stacklevel=3)
    tokens = params.tokens_init
    seen = []
    refined = tokens
    for layer in range(n_layers):
        seen.append(tokens)
        n = tokens.shape[-2]
        za, refined = ad.split(transformer_layer(ad.concat([za, tokens], axis=-2),
                                                 params.condense_a[layer]), [t, n], axis=-2)
        # the refined copy leaving the b-side transformer is never used
        zb, _ = ad.split(transformer_layer(ad.concat([zb, refined], axis=-2),
                                           params.condense_b[layer]), [t, n], axis=-2)
        if layer < n_layers - 1:
            fresh = params.fresh_tokens[layer]
            tokens = cross_transformer(fresh, refined, params.cross[layer]) if params.cross else fresh
    return zb, refined, BottleneckState(seen, params.schedule, refined)


def fuse_pair(za: Tensor, zb: Tensor, params: MSBTParams) -> tuple[Tensor, Tensor]:
    """Fuse modality a into modality b; returns (Z^{ab}: T x D, final tokens: n_L x D)."""
    za, zb = ad.as_tensor(za), ad.as_tensor(zb)
    if za.ndim != 2 or zb.ndim != 2 or za.shape[0] != zb.shape[0]:
        raise DimensionError(f"fuse_pair: need matching T x D inputs, got {za.shape} and {zb.shape}")
    fused, final, _ = _fuse(za, zb, params)
    return fused, final


def fuse_all_pairs(features: Tensor | dict[str, Tensor], modalities, pairs, params: MSBTParams) -> FusedPairSet:
    """Fuse every ordered pair in ``pairs`` using stacked ``params`` (leading axis = pair).

    ``features`` is either a (M, T, D) stack in ``modalities`` order or a
    modality -> (T, D) mapping.
    """
    if len(modalities) < 2:
        raise ConfigurationError(f"fusion needs at least 2 modalities, got {list(modalities)}")
    if params.tokens_init.shape[0] != len(pairs) or params.tokens_init.ndim != 3:
        raise ConfigurationError(f"stacked MSBT params hold {params.tokens_init.shape[0]} pairs, "
                                 f"expected {len(pairs)}")
    if isinstance(features, dict):
        missing = [m for m in modalities if m not in features]
        if missing:
            raise ConfigurationError(f"missing modality features: {missing}")
        features = ad.concat([ad.as_tensor(features[m]).reshape((1,) + ad.as_tensor(features[m]).shape)
                              for m in modalities], axis=0)
    index = {m: i for i, m in enumerate(modalities)}
    za = features[[index[a] for a, _ in pairs]]
    zb = features[[index[b] for _, b in pairs]]
    fused, final, state = _fuse(za, zb, params)
    return FusedPairSet(list(pairs), fused, final, state)
