"""Finite-difference gradient audits for every primitive and the assembled model."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import autodiff as ad
from .attention import TransformerLayerParams, cross_transformer, transformer_layer
from .autodiff import GradCheckReport, Tensor, grad_check
from .config import ModelConfig
from .losses import mil_topk_loss, tcc_loss
from .model import init_model
from .trainer import video_loss


def _rand(rng, *shape, low=-1.0, high=1.0) -> Tensor:
    return Tensor(rng.uniform(low, high, size=shape))


def run_primitive_gradchecks(seed: int = 0, tol: float = 1e-4) -> Iterator[tuple[str, GradCheckReport]]:
    """Yield (name, report) for each differentiable primitive on random inputs in [-1, 1]."""
    rng = np.random.default_rng(seed)
    rng_fixed = np.random.default_rng(seed + 100)
    weights = {}

    # random linear functional, so every output entry gets a distinct upstream gradient
    def weighted_sum(t: Tensor, key: str) -> Tensor:
        if key not in weights or weights[key].shape != t.shape:
            weights[key] = Tensor(rng_fixed.normal(size=t.shape))
        return ad.sum_(t * weights[key])

    a, b = _rand(rng, 3, 4), _rand(rng, 4, 2)
    yield "matmul", grad_check(lambda x, y: weighted_sum(ad.matmul(x, y), "mm"), [a, b], tol=tol)
    yield "add (broadcast)", grad_check(lambda x, y: weighted_sum(x + y, "add"), [_rand(rng, 3, 4), _rand(rng, 4)], tol=tol)
    yield "sub", grad_check(lambda x, y: weighted_sum(x - y, "sub"), [_rand(rng, 3, 4), _rand(rng, 3, 1)], tol=tol)
    yield "mul (broadcast)", grad_check(lambda x, y: weighted_sum(x * y, "mul"), [_rand(rng, 3, 4), _rand(rng, 1, 4)], tol=tol)
    yield "div", grad_check(lambda x, y: weighted_sum(x / y, "div"),
                            [_rand(rng, 3, 4), _rand(rng, 3, 4, low=0.5, high=1.5)], tol=tol)
    yield "scale", grad_check(lambda x: weighted_sum(ad.scale(x, -2.5), "scale"), _rand(rng, 5), tol=tol)
    yield "exp", grad_check(lambda x: weighted_sum(ad.exp(x), "exp"), _rand(rng, 3, 4), tol=tol)
    yield "log", grad_check(lambda x: weighted_sum(ad.log(x), "log"), _rand(rng, 3, 4, low=0.2, high=1.0), tol=tol)
    yield "sqrt", grad_check(lambda x: weighted_sum(ad.sqrt(x), "sqrt"), _rand(rng, 3, 4, low=0.2, high=1.0), tol=tol)
    # keep relu inputs away from the kink
    r = _rand(rng, 3, 4)
    r.data = np.where(np.abs(r.data) < 0.05, 0.5, r.data)
    yield "relu", grad_check(lambda x: weighted_sum(ad.relu(x), "relu"), r, tol=tol)
    yield "gelu", grad_check(lambda x: weighted_sum(ad.gelu(x), "gelu"), _rand(rng, 3, 4), tol=tol)
    yield "sigmoid", grad_check(lambda x: weighted_sum(ad.sigmoid(x), "sig"), _rand(rng, 3, 4), tol=tol)
    yield "sum", grad_check(lambda x: weighted_sum(ad.sum_(x, axis=0), "sumax"), _rand(rng, 3, 4), tol=tol)
    yield "mean", grad_check(lambda x: weighted_sum(ad.mean(x, axis=1, keepdims=True), "mean"), _rand(rng, 3, 4), tol=tol)
    yield "transpose", grad_check(lambda x: weighted_sum(ad.transpose(x, (2, 0, 1)), "tr"), _rand(rng, 2, 3, 4), tol=tol)
    yield "reshape", grad_check(lambda x: weighted_sum(x.reshape((4, 3)), "rs"), _rand(rng, 3, 4), tol=tol)
    yield "concat", grad_check(lambda x, y: weighted_sum(ad.concat([x, y], axis=0), "cat"),
                               [_rand(rng, 2, 4), _rand(rng, 3, 4)], tol=tol)
    yield "split", grad_check(lambda x: weighted_sum(ad.split(x, [1, 3], axis=1)[1], "split"), _rand(rng, 3, 4), tol=tol)
    yield "take (fancy)", grad_check(lambda x: weighted_sum(x[[0, 2, 0]], "take"), _rand(rng, 3, 4), tol=tol)
    yield "softmax_rows", grad_check(lambda x: weighted_sum(ad.softmax_rows(x), "sm"), _rand(rng, 3, 4), tol=tol)
    yield "logsumexp", grad_check(lambda x: weighted_sum(ad.logsumexp(x, axis=-1), "lse"), _rand(rng, 3, 4), tol=tol)
    yield "layernorm", grad_check(
        lambda x, g, bb: weighted_sum(ad.layernorm(x, g, bb), "ln"),
        [_rand(rng, 3, 5), _rand(rng, 5, low=0.5, high=1.5), _rand(rng, 5)], tol=tol)
    yield "linear", grad_check(lambda x, w, bb: weighted_sum(ad.linear(x, w, bb), "lin"),
                               [_rand(rng, 2, 3, 4), _rand(rng, 4, 5), _rand(rng, 5)], tol=tol)
    wts = [_rand(rng, 2, 8, 8) for _ in range(4)] + [_rand(rng, 2, 1, 8)]
    yield "attention (self)", grad_check(
        lambda x, *w: weighted_sum(ad.attention(x, x, *w, heads=4), "att"), [_rand(rng, 2, 5, 8)] + wts, tol=tol)
    yield "attention (cross)", grad_check(
        lambda x, y, *w: weighted_sum(ad.attention(x, y, *w, heads=2), "xatt"),
        [_rand(rng, 3, 8), _rand(rng, 2, 4, 8)] + wts, tol=tol)
    yield "cosine_similarity", grad_check(lambda u, v: ad.cosine_similarity(u, v), [_rand(rng, 6), _rand(rng, 6)], tol=tol)
    yield "cosine_matrix", grad_check(lambda x, y: weighted_sum(ad.cosine_matrix(x, y), "cm"),
                                      [_rand(rng, 3, 4), _rand(rng, 2, 4)], tol=tol)

    layer = TransformerLayerParams.init(rng, 8, 4, 32)
    layer2 = TransformerLayerParams.init(rng, 8, 4, 32)
    z = _rand(rng, 5, 8)
    yield "transformer x2", grad_check(
        lambda x: weighted_sum(transformer_layer(transformer_layer(x, layer), layer2), "tf"), z, tol=tol)
    x, y = _rand(rng, 3, 8), _rand(rng, 4, 8)
    yield "cross_transformer", grad_check(
        lambda q, kv: weighted_sum(cross_transformer(q, kv, layer), "ct"), [x, y], tol=tol)
    yield "tcc_loss", grad_check(lambda p: tcc_loss(p, 0.5), _rand(rng, 2, 3, 4), tol=tol)
    s = Tensor(rng.uniform(0.05, 0.95, size=6))
    yield "mil_topk_loss", grad_check(lambda v: mil_topk_loss(v, 1, 3), s, tol=tol)


def toy_sample(cfg: ModelConfig, t: int = 4, seed: int = 0) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    return {m: rng.uniform(-1, 1, size=(t, cfg.input_dims[m])) for m in cfg.modalities}


class _Video:
    def __init__(self, features, label):
        self.id = "gradcheck"
        self.features = features
        self.video_label = label


def run_model_gradcheck(preset: str = "toy", seed: int = 0, tol: float = 1e-3,
                        label: int = 1) -> GradCheckReport:
    """Check d(MIL + lambda*TCC)/d(parameter) for every model parameter."""
    if preset != "toy":
        raise ValueError(f"unknown gradcheck preset {preset!r}")
    cfg = ModelConfig.toy()
    params = init_model(cfg, seed)
    video = _Video(toy_sample(cfg, 4, seed), label)
    named = dict(params.named_parameters())
    return grad_check(lambda: video_loss(video, params, cfg)[0], named, tol=tol)
