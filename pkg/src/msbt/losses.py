"""Temporal consistency contrast, top-K MIL, and the combined objective."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigurationError, ContractError, DomainError


@dataclass
class LossConfig:
    tau: float = 0.5
    k: int = 9
    lam: float = 0.1

    def __post_init__(self):
        if self.tau <= 0 or self.k < 1 or self.lam < 0:
            raise ConfigurationError(f"invalid loss config {self}")


def _stack_pairs(weighted_pairs) -> Tensor:
    if isinstance(weighted_pairs, Tensor):
        return weighted_pairs
    items = list(weighted_pairs.values()) if isinstance(weighted_pairs, dict) else list(weighted_pairs)
    return ad.concat([x.reshape((1,) + x.shape) for x in items], axis=0)


def tcc_loss(weighted_pairs, tau: float = 0.5, eps: float = 1e-8) -> Tensor:
    """Within-video contrast across pairwise fused features.

    ``weighted_pairs`` is a (P, T, D) stack, a list of (T, D) tensors, or a
    pair -> tensor mapping. For every snippet t and every two distinct
    pairs (p, q) the positive is q at t and the candidates are q at every
    snippet. Summed and divided by P * T.
    """
    z = _stack_pairs(weighted_pairs)
    p, t, d = z.shape
    if p < 2:
        raise ContractError("tcc_loss needs at least two fused pairs")
    if tau <= 0:
        raise ConfigurationError("tau must be > 0")
    flat = z.reshape((p * t, d))
    sim = ad.cosine_matrix(flat, flat, eps)                       # (P*T, P*T)
    logits = ad.scale(ad.transpose(sim.reshape((p, t, p, t)), (0, 2, 1, 3)), 1.0 / tau)  # [p, q, t, k]
    lse = ad.logsumexp(logits, axis=-1)                            # (P, P, T)
    positive = ad.sum_(logits * np.eye(t), axis=-1)                # logits[p, q, t, t]
    off_pair = (1.0 - np.eye(p))[:, :, None]
    return ad.scale(ad.sum_((lse - positive) * off_pair), 1.0 / (p * t))


def tcc_loss_reference(weighted_pairs, tau: float = 0.5, eps: float = 1e-8) -> float:
    """Plain-loop evaluation of the same objective (float, no graph)."""
    z = _stack_pairs(weighted_pairs).data
    p, t, _ = z.shape

    def cos(u, v):
        return float(u @ v) / (max(np.linalg.norm(u), eps) * max(np.linalg.norm(v), eps))

    total = 0.0
    for ti in range(t):
        for a in range(p):
            for c in range(p):
                if a == c:
                    continue
                num = np.exp(cos(z[a, ti], z[c, ti]) / tau)
                den = sum(np.exp(cos(z[a, ti], z[c, k]) / tau) for k in range(t))
                total -= np.log(num / den)
    return total / (p * t)


def effective_k(k: int, t: int) -> int:
    return max(1, min(k, t))


def mil_topk_loss(scores: Tensor, y: int | float, k: int = 9) -> Tensor:
    """Binary cross-entropy on the mean of the K largest snippet scores."""
    scores = ad.as_tensor(scores)
    s = scores.data.reshape(-1)
    if s.size < 1:
        raise ContractError("mil_topk_loss: empty score vector")
    if np.any(s <= 0) or np.any(s >= 1):
        raise DomainError("mil_topk_loss: scores must lie strictly inside (0, 1)")
    if y not in (0, 1):
        raise DomainError(f"mil_topk_loss: label must be 0 or 1, got {y}")
    kk = effective_k(k, s.size)
    top = np.argsort(-s, kind="stable")[:kk]
    sbar = scores.reshape((s.size,))[top].mean()
    if y == 1:
        return -ad.log(sbar)
    return -ad.log(1.0 - sbar)


def total_loss(mil: Tensor, tcc: Tensor, lam: float) -> Tensor:
    return mil + ad.scale(tcc, lam)
