"""FLOPs accounting and the epoch-level temperature controller.

Only the dominant matmul terms are counted; softmax and normalisation costs
are ignored. The per-block formula follows the common ViT convention in which
``block_flops(197, 768, 12, 4) * 12`` comes out near 17.5 G.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

from .errors import InvalidArgument

COUNTING_CONVENTION = "flops=2*MAC; softmax/norm excluded"
BRANCHES = ("vision", "language")


def attention_flops(n: int, d: int) -> float:
    # q/k/v/out projections + QK^T + AV
    return 4.0 * n * d * d + 2.0 * n * n * d


def ffn_flops(n: int, d: int, ffn_mult: int) -> float:
    return 2.0 * ffn_mult * n * d * d


def block_flops(n: int, d: int, heads: int, ffn_mult: int) -> float:
    """Cost of one transformer block on ``n`` tokens of width ``d``.

    ``heads`` does not change the count (heads split the width).
    """
    if min(n, d, heads, ffn_mult) <= 0:
        raise InvalidArgument("block_flops arguments must be positive")
    return attention_flops(n, d) + ffn_flops(n, d, ffn_mult)


def cross_attention_flops(n_q: int, n_ctx: int, d_q: int, d_ctx: int) -> float:
    return (2.0 * n_q * d_q * d_q + 2.0 * n_ctx * d_ctx * d_q
            + 2.0 * n_q * n_ctx * d_q)


def mag_flops(n: int, d_in: int, d_k: int, k: int) -> float:
    return n * d_in * d_k + 2.0 * k * n * d_k


@dataclass(frozen=True)
class FlopsModel:
    d_v: int
    d_l: int
    heads: int
    ffn_mult: int
    layers: int
    embed_flops: float = 0.0
    head_flops: float = 0.0
    cross_attention: bool = False
    include_overhead: bool = False
    n_learnable: int = 0
    d_k: int = 0

    def __post_init__(self):
        if min(self.d_v, self.d_l, self.heads, self.ffn_mult, self.layers) <= 0:
            raise InvalidArgument("FlopsModel widths, heads, ffn_mult and layers must be positive")

    @classmethod
    def from_config(cls, cfg, include_overhead: bool = False) -> "FlopsModel":
        return cls(
            d_v=cfg.d_v, d_l=cfg.d_l, heads=cfg.heads, ffn_mult=cfg.ffn_mult,
            layers=cfg.layers,
            embed_flops=float(cfg.n_patches * cfg.d_v * cfg.d_v + cfg.n_words * cfg.d_l * cfg.d_l),
            head_flops=float(2 * (cfg.d_v + cfg.d_l)),
            cross_attention=cfg.cross_attention,
            include_overhead=include_overhead,
            n_learnable=cfg.n_learnable, d_k=cfg.d_k,
        )

    def width(self, branch: str) -> int:
        return self.d_v if branch == "vision" else self.d_l


def layer_flops(model: FlopsModel, branch: str, n_in: int, n_out: int,
                n_context: int | None = None) -> float:
    """One block: attention on the tokens entering, FFN on the tokens kept."""
    d = model.width(branch)
    total = attention_flops(n_in, d) + ffn_flops(n_out, d, model.ffn_mult)
    if model.cross_attention and branch == "language" and n_context is not None:
        total += cross_attention_flops(n_out, n_context, model.d_l, model.d_v)
    if model.include_overhead:
        total += mag_flops(n_in, d, model.d_k, model.n_learnable)
    return total


def model_flops(records, model: FlopsModel) -> float:
    """GFLOPs of one image-text pair from its per-layer alive counts.

    ``records`` is an iterable of objects with ``branch``, ``layer``, ``n_in``
    and ``n_out`` attributes covering every layer of both branches.
    """
    by_key = {}
    for rec in records:
        by_key[(rec.branch, rec.layer)] = rec
    missing = [(b, l) for b in BRANCHES for l in range(model.layers) if (b, l) not in by_key]
    if missing:
        raise InvalidArgument(f"incomplete report: missing (branch, layer) {missing[:4]}")
    total = model.embed_flops + model.head_flops
    for layer in range(model.layers):
        vis = by_key[("vision", layer)]
        lang = by_key[("language", layer)]
        total += layer_flops(model, "vision", vis.n_in, vis.n_out)
        total += layer_flops(model, "language", lang.n_in, lang.n_out, n_context=vis.n_out)
    return total / 1e9


def baseline_flops(model: FlopsModel, n_patches: int, n_words: int) -> float:
    """GFLOPs with nothing pruned (special token included in each branch)."""

    @dataclass
    class _Rec:
        branch: str
        layer: int
        n_in: int
        n_out: int

    recs = []
    for layer in range(model.layers):
        recs.append(_Rec("vision", layer, n_patches + 1, n_patches + 1))
        recs.append(_Rec("language", layer, n_words + 1, n_words + 1))
    return model_flops(recs, model)


def dataset_average_flops(per_pair) -> float:
    values = list(per_pair)
    if not values:
        raise InvalidArgument("cannot average GFLOPs over an empty dataset")
    return math.fsum(values) / len(values)


@dataclass(frozen=True)
class BudgetState:
    target_ratio: float
    baseline: float
    temperature: float
    eta: float = 0.5
    t_min: float = 1e-3
    t_max: float = 1e3
    history: tuple = field(default_factory=tuple)

    def __post_init__(self):
        if self.baseline <= 0:
            raise InvalidArgument("baseline GFLOPs must be positive")
        if not 0.0 <= self.target_ratio < 1.0:
            raise InvalidArgument("target ratio must lie in [0, 1)")
        if not self.t_min <= self.temperature <= self.t_max:
            raise InvalidArgument(
                f"temperature {self.temperature} outside [{self.t_min}, {self.t_max}]")

    @property
    def target(self) -> float:
        return (1.0 - self.target_ratio) * self.baseline


def adjust_temperature(state: BudgetState, measured: float) -> BudgetState:
    """Multiplicative update ``T <- clamp(T * (measured / target) ** eta)``.

    Spending more than the target raises T, which sharpens the sparse token
    attention and lifts the pruning threshold.
    """
    if not measured > 0:
        raise InvalidArgument(f"measured GFLOPs must be positive, got {measured}")
    if measured == state.target:
        new_t = state.temperature
    else:
        new_t = state.temperature * (measured / state.target) ** state.eta
        new_t = min(max(new_t, state.t_min), state.t_max)
    epoch = len(state.history)
    return replace(state, temperature=new_t,
                   history=state.history + ((epoch, measured, state.temperature),))
