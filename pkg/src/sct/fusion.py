"""Feature-wise modulation of token embeddings by a condition vector.

Two small MLPs project the condition into a sigmoid gate gamma in
(0,1)^d and an additive shift beta; every token embedding in the
sequence is then mapped to x * gamma + beta. Both final projector
layers start at zero, so training begins from the benign transform
gamma = 0.5, beta = 0.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diff import (
    ModelBundle, ShapeError, Tensor, broadcast_rows, gelu, matmul, sigmoid,
)


@dataclass
class FusionConfig:
    d_c: int
    d_llm: int
    hidden: int = 256


def init_fusion_params(bundle: ModelBundle, rng: np.random.Generator,
                       cfg: FusionConfig, prefix: str = "fusion."):
    for head in ("gate.", "bias."):
        p = prefix + head
        bundle.add(p + "w1", rng.normal(0, cfg.d_c ** -0.5,
                                        size=(cfg.d_c, cfg.hidden)))
        bundle.add(p + "b1", np.zeros(cfg.hidden))
        bundle.add(p + "w2", np.zeros((cfg.hidden, cfg.d_llm)))
        bundle.add(p + "b2", np.zeros(cfg.d_llm))


def _mlp(bundle: ModelBundle, p: str, x: Tensor) -> Tensor:
    n = x.shape[0]
    h = gelu(matmul(x, bundle[p + "w1"])
             + broadcast_rows(bundle[p + "b1"], n))
    return matmul(h, bundle[p + "w2"]) + broadcast_rows(bundle[p + "b2"], n)


def compute_film(cond: Tensor, bundle: ModelBundle,
                 prefix: str = "fusion.") -> tuple[Tensor, Tensor]:
    """(gamma, beta), each (B, d_llm), from a (B, d_c) condition batch."""
    gamma = sigmoid(_mlp(bundle, prefix + "gate.", cond))
    beta = _mlp(bundle, prefix + "bias.", cond)
    return gamma, beta


def modulate(x: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    """x * gamma + beta with one (d,) or (1, d) pair for all n rows."""
    if x.ndim != 2:
        raise ShapeError("modulate", x.shape)
    d = x.shape[1]
    for v in (gamma, beta):
        if v.shape not in ((d,), (1, d)):
            raise ShapeError("modulate", x.shape, v.shape)
    n = x.shape[0]
    return x * broadcast_rows(gamma, n) + broadcast_rows(beta, n)
