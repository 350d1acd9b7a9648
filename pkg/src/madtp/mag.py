"""Multi-modality alignment guidance.

Tokens from either branch are mapped into a shared ``d_k``-wide space by a
per-layer affine map, then a single set of learnable tokens ``E`` attends over
them. The attention maps guide pruning; the attended features of the two
branches are pulled together by a cosine loss.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateInput, InvalidArgument
from .numerics import scaled_dot_attention


@dataclass
class LearnableTokens:
    E: np.ndarray  # (K, d_k)


@dataclass
class ProjectionWeights:
    w_v: list  # per layer, (d_k, d_v)
    b_v: list  # per layer, (d_k,)
    w_t: list  # per layer, (d_k, d_l)
    b_t: list  # per layer, (d_k,)

    def pair(self, modality: str, layer: int):
        if modality == "vision":
            return self.w_v[layer], self.b_v[layer]
        if modality == "language":
            return self.w_t[layer], self.b_t[layer]
        raise InvalidArgument(f"unknown modality {modality!r}")


@dataclass
class AlignmentOutput:
    a_token: np.ndarray   # (K, n_alive)
    features: np.ndarray  # (K, d_k)


class Mag:
    """Shared guidance module: one ``E`` for every layer and both branches."""

    def __init__(self, tokens: LearnableTokens, projections: ProjectionWeights):
        self.tokens = tokens
        self.projections = projections

    @property
    def d_k(self) -> int:
        return self.tokens.E.shape[1]

    def __call__(self, x: np.ndarray, modality: str, layer: int) -> AlignmentOutput:
        mapped = project(x, modality, layer, self.projections)
        a_token, feats = token_attention(self.tokens.E, mapped, self.d_k)
        return AlignmentOutput(a_token, feats)


def init_mag(cfg) -> Mag:
    """Seeded Gaussian init.

    ``E`` has std ``1/sqrt(d_k)``. Projections use std ``sqrt(d_k/d_in)`` so
    that, for a token with unit-scale coordinates, the token attention logits
    ``E x'^T / sqrt(d_k)`` start at unit scale.
    """
    rng = np.random.default_rng([cfg.seed, 7001])
    E = rng.normal(0.0, 1.0 / math.sqrt(cfg.d_k), size=(cfg.n_learnable, cfg.d_k))
    w_v, b_v, w_t, b_t = [], [], [], []
    for _ in range(cfg.layers):
        w_v.append(rng.normal(0.0, math.sqrt(cfg.d_k / cfg.d_v), size=(cfg.d_k, cfg.d_v)))
        b_v.append(np.zeros(cfg.d_k))
        w_t.append(rng.normal(0.0, math.sqrt(cfg.d_k / cfg.d_l), size=(cfg.d_k, cfg.d_l)))
        b_t.append(np.zeros(cfg.d_k))
    return Mag(LearnableTokens(E), ProjectionWeights(w_v, b_v, w_t, b_t))


def project(x: np.ndarray, modality: str, layer: int, weights: ProjectionWeights) -> np.ndarray:
    """Affine map of token rows into the shared space: ``x W^T + B``."""
    w, b = weights.pair(modality, layer)
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != w.shape[1]:
        raise InvalidArgument(
            f"{modality} tokens of shape {x.shape} do not fit projection {w.shape}")
    return x @ w.T + b


def token_attention(E: np.ndarray, mapped: np.ndarray, d_k: int):
    """Scaled dot-product attention of the learnable tokens over ``mapped``.

    Returns ``(A_token, features)`` with ``A_token`` of shape ``(K, n)``.
    """
    if mapped.ndim != 2 or mapped.shape[1] != E.shape[1] or E.shape[1] != d_k:
        raise InvalidArgument(
            f"mapped tokens {mapped.shape} incompatible with E {E.shape} and d_k={d_k}")
    out, attn = scaled_dot_attention(E, mapped, mapped, math.sqrt(d_k))
    return attn, out


def alignment_loss(e_v: np.ndarray, e_l: np.ndarray) -> float:
    """Mean over rows of ``1 - cos(e_v[i], e_l[i])``; lies in [0, 2]."""
    e_v = np.asarray(e_v, dtype=np.float64)
    e_l = np.asarray(e_l, dtype=np.float64)
    if e_v.shape != e_l.shape or e_v.ndim != 2:
        raise InvalidArgument(f"feature shapes differ: {e_v.shape} vs {e_l.shape}")
    nv = np.linalg.norm(e_v, axis=1)
    nl = np.linalg.norm(e_l, axis=1)
    if np.any(nv == 0) or np.any(nl == 0):
        raise DegenerateInput("alignment loss undefined for a zero feature row")
    cos = np.clip(np.sum(e_v * e_l, axis=1) / (nv * nl), -1.0, 1.0)
    return float(np.mean(1.0 - cos))
