"""Per-pair weights from the final bottleneck tokens, and the weighted concatenation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .attention import TransformerLayerParams, transformer_stack
from .autodiff import Tensor
from .encoders import RegressorParams, regress
from .errors import ConfigurationError, ContractError, DimensionError
from .fusion import FusedPairSet


@dataclass
class WeightHeadParams:
    transformer: list[TransformerLayerParams]
    theta: RegressorParams

    @classmethod
    def init(cls, rng: np.random.Generator, d_model: int, heads: int, d_ff: int, layers: int) -> "WeightHeadParams":
        if layers < 1:
            raise ConfigurationError("weighting head needs at least one transformer layer")
        stack = [TransformerLayerParams.init(rng, d_model, heads, d_ff) for _ in range(layers)]
        return cls(stack, RegressorParams.init(rng, d_model))


def compute_weights(fps: FusedPairSet, params: WeightHeadParams) -> Tensor:
    """One weight in (0, 1) per ordered pair, in ``fps.pairs`` order.

    The final tokens of all pairs form one token sequence for the
    transformer; each pair's block is then mean-pooled and scored by Theta.
    """
    final = fps.final_stack
    if final is None or final.ndim != 3 or final.shape[0] != len(fps.pairs):
        raise ContractError("compute_weights: final bottleneck tokens missing for some pairs")
    p, n, d = final.shape
    h = transformer_stack(final.reshape((p * n, d)), params.transformer)
    pooled = h.reshape((p, n, d)).mean(axis=1)
    return regress(pooled, params.theta).reshape((p,))


def weighted_concat(fps: FusedPairSet, w: Tensor | None) -> Tensor:
    """[w_1 Z^{pair_1} || ... || w_P Z^{pair_P}] along the feature axis; ``w=None`` means no weighting."""
    fused = fps.fused_stack
    p, t, d = fused.shape
    if w is not None:
        if w.shape != (p,):
            raise DimensionError(f"weighted_concat: {w.shape[0] if w.ndim else 0} weights for {p} pairs")
        fused = fused * w.reshape((p, 1, 1))
    return ad.transpose(fused, (1, 0, 2)).reshape((t, p * d))


def split_blocks(zhat: Tensor, n_pairs: int) -> Tensor:
    """Inverse layout of ``weighted_concat``: (T, P*D) -> (P, T, D)."""
    t, width = zhat.shape
    if width % n_pairs:
        raise DimensionError(f"cannot split width {width} into {n_pairs} blocks")
    return ad.transpose(zhat.reshape((t, n_pairs, width // n_pairs)), (1, 0, 2))
