"""Unimodal encoders, the global encoder and the MLP regressors."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .attention import TransformerLayerParams, transformer_stack
from .autodiff import Tensor
from .errors import ConfigurationError, DimensionError
from .params import uniform, zeros


@dataclass
class Linear:
    w: Tensor
    b: Tensor

    @classmethod
    def init(cls, rng: np.random.Generator, d_in: int, d_out: int) -> "Linear":
        return cls(uniform(rng, (d_in, d_out), d_in), zeros((d_out,)))

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.w.shape[0]:
            raise DimensionError(f"linear: input width {x.shape[-1]} != expected {self.w.shape[0]}")
        return ad.linear(x, self.w, self.b)


@dataclass
class RegressorParams:
    """Three affine layers, width -> width/2 -> width/4 -> 1."""
    fc1: Linear
    fc2: Linear
    fc3: Linear

    @classmethod
    def init(cls, rng: np.random.Generator, width: int) -> "RegressorParams":
        h1, h2 = max(width // 2, 1), max(width // 4, 1)
        return cls(Linear.init(rng, width, h1), Linear.init(rng, h1, h2), Linear.init(rng, h2, 1))


def regress(x: Tensor, p: RegressorParams) -> Tensor:
    """Apply the MLP row-wise; returns (..., 1) values in (0, 1)."""
    h = ad.gelu(p.fc1(x))
    h = ad.gelu(p.fc2(h))
    return ad.sigmoid(p.fc3(h))


@dataclass
class UnimodalEncoderParams:
    projections: dict[str, Linear]
    # one stack shared by every modality
    transformer: list[TransformerLayerParams]

    @classmethod
    def init(cls, rng: np.random.Generator, input_dims: dict[str, int], modalities, d_model: int,
             heads: int, d_ff: int, layers: int) -> "UnimodalEncoderParams":
        projections = {m: Linear.init(rng, input_dims[m], d_model) for m in modalities}
        stack = [TransformerLayerParams.init(rng, d_model, heads, d_ff) for _ in range(layers)]
        return cls(projections, stack)


def unimodal_encode(raw: Tensor, modality: str, params: UnimodalEncoderParams) -> Tensor:
    """Project T snippet vectors to D_E and run the shared transformer over them."""
    if modality not in params.projections:
        raise ConfigurationError(f"modality {modality!r} is not configured "
                                 f"(have {sorted(params.projections)})")
    raw = ad.as_tensor(raw)
    if raw.ndim != 2:
        raise DimensionError(f"{modality}: expected a T x D_m matrix, got shape {raw.shape}")
    return transformer_stack(params.projections[modality](raw), params.transformer)


def encode_modalities(features: dict[str, Tensor], modalities, params: UnimodalEncoderParams) -> Tensor:
    """Encode every modality at once; returns a (M, T, D_E) stack in ``modalities`` order.

    Equivalent to calling ``unimodal_encode`` per modality, but the shared
    transformer runs once over the stacked sequences.
    """
    projected = []
    for m in modalities:
        if m not in params.projections:
            raise ConfigurationError(f"modality {m!r} is not configured")
        x = ad.as_tensor(features[m])
        projected.append(params.projections[m](x).reshape((1,) + x.shape[:1] + (-1,)))
    return transformer_stack(ad.concat(projected, axis=0), params.transformer)


@dataclass
class GlobalHeadParams:
    transformer: list[TransformerLayerParams]
    omega: RegressorParams

    @classmethod
    def init(cls, rng: np.random.Generator, width: int, heads: int, ffn_mult: int,
             layers: int) -> "GlobalHeadParams":
        stack = [TransformerLayerParams.init(rng, width, heads, ffn_mult * width) for _ in range(layers)]
        return cls(stack, RegressorParams.init(rng, width))

    @property
    def width(self) -> int:
        return self.omega.fc1.w.shape[0]


def global_encode_and_score(zhat: Tensor, params: GlobalHeadParams) -> Tensor:
    """Global transformer over the T fused tokens, then Omega per token; returns (T,) scores."""
    if zhat.ndim != 2 or zhat.shape[1] != params.width:
        raise DimensionError(f"global encoder: expected T x {params.width}, got {zhat.shape}")
    h = transformer_stack(zhat, params.transformer)
    return regress(h, params.omega).reshape((zhat.shape[0],))
