"""Full model: unimodal encoders -> pairwise fusion -> weighting -> global scoring."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import ModelConfig
from .encoders import GlobalHeadParams, UnimodalEncoderParams, encode_modalities, global_encode_and_score
from .errors import ContractError
from .fusion import FusedPairSet, MSBTParams, fixed_schedule, fuse_all_pairs, token_schedule
from .params import count_parameters, named_parameters
from .weighting import WeightHeadParams, compute_weights, weighted_concat


def bottleneck_schedule(cfg: ModelConfig) -> list[int]:
    if cfg.fixed_tokens is not None:
        return fixed_schedule(cfg.fixed_tokens, cfg.layers_msbt)
    return token_schedule(cfg.bottleneck_n1, cfg.layers_msbt)


@dataclass
class ModelParams:
    encoder: UnimodalEncoderParams
    msbt: MSBTParams                        # stacked, leading axis = ordered pair
    weight_head: WeightHeadParams | None    # None when weighting is disabled
    global_head: GlobalHeadParams

    def named_parameters(self):
        return named_parameters(self)

    def num_parameters(self) -> int:
        return count_parameters(self)


def init_model(cfg: ModelConfig, seed: int = 0) -> ModelParams:
    rng = np.random.default_rng(seed)
    d, h, dff = cfg.d_model, cfg.heads, cfg.d_ff
    encoder = UnimodalEncoderParams.init(rng, cfg.input_dims, cfg.modalities, d, h, dff, cfg.layers_unimodal)
    msbt = MSBTParams.init(rng, d, h, dff, bottleneck_schedule(cfg), cfg.cross_transformer,
                           cfg.token_std, stack=(cfg.n_pairs,))
    weight_head = WeightHeadParams.init(rng, d, h, dff, cfg.layers_weight) if cfg.weighting else None
    global_head = GlobalHeadParams.init(rng, cfg.n_pairs * d, h, cfg.ffn_mult, cfg.layers_global)
    return ModelParams(encoder, msbt, weight_head, global_head)


@dataclass
class ForwardOutput:
    scores: Tensor              # (T,) snippet anomaly scores
    weighted_pairs: Tensor      # (P, T, D_E) per-pair features after weighting; TCC input
    zhat: Tensor                # (T, P * D_E) weighted concatenation
    weights: Tensor | None      # (P,) or None when weighting is disabled
    fused: FusedPairSet

    @property
    def tcc_inputs(self) -> Tensor:
        return self.weighted_pairs


def forward_video(sample, params: ModelParams, cfg: ModelConfig) -> ForwardOutput:
    """Score one video. ``sample`` is a VideoSample or a modality -> (T, D_m) mapping."""
    features = sample.features if hasattr(sample, "features") else sample
    missing = [m for m in cfg.modalities if m not in features]
    if missing:
        vid = getattr(sample, "id", "<features>")
        raise ContractError(f"video {vid}: missing modalities {missing}")
    encoded = encode_modalities({m: features[m] for m in cfg.modalities}, cfg.modalities, params.encoder)
    fps = fuse_all_pairs(encoded, cfg.modalities, cfg.pairs, params.msbt)
    weights = None
    weighted = fps.fused_stack
    if cfg.weighting:
        weights = compute_weights(fps, params.weight_head)
        weighted = fps.fused_stack * weights.reshape((cfg.n_pairs, 1, 1))
    zhat = weighted_concat(fps, weights)
    scores = global_encode_and_score(zhat, params.global_head)
    return ForwardOutput(scores, weighted, zhat, weights, fps)


def predict(sample, params: ModelParams, cfg: ModelConfig) -> np.ndarray:
    with ad.no_grad():
        return forward_video(sample, params, cfg).scores.data.copy()
