"""A small dual-branch vision-language transformer with pruning hooks.

Each block is pre-norm: ``x + MHSA(LN(x))``, then token guidance and pruning,
then (language branch only, when enabled) cross attention onto the vision
tokens, then ``x + FFN(LN(x))``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from . import budget
from .config import VltConfig
from .dtp import prune
from .errors import InvalidArgument, UnsupportedOperation
from .mag import Mag, alignment_loss
from .numerics import softmax_rows
from .report import InstanceReport, LayerRecord, PruneReport
from .tokens import TokenBatch

LN_EPS = 1e-6


@dataclass
class BlockWeights:
    ln1_g: np.ndarray
    ln1_b: np.ndarray
    wq: np.ndarray
    bq: np.ndarray
    wk: np.ndarray
    bk: np.ndarray
    wv: np.ndarray
    bv: np.ndarray
    wo: np.ndarray
    bo: np.ndarray
    ln2_g: np.ndarray
    ln2_b: np.ndarray
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    cross: "CrossWeights | None" = None


@dataclass
class CrossWeights:
    ln_g: np.ndarray
    ln_b: np.ndarray
    wq: np.ndarray  # (d_q, d_q)
    wk: np.ndarray  # (d_ctx, d_q)
    wv: np.ndarray  # (d_ctx, d_q)
    wo: np.ndarray  # (d_q, d_q)


@dataclass
class Embedding:
    w: np.ndarray        # (d, d)
    pos: np.ndarray      # (n, d) per-position bias
    special: np.ndarray  # (d,)


@dataclass
class ModelWeights:
    vision_embed: Embedding
    language_embed: Embedding
    vision: list
    language: list
    head_w: np.ndarray   # (d_v + d_l, 2)
    head_b: np.ndarray

    def blocks(self, modality: str) -> list:
        return self.vision if modality == "vision" else self.language

    def embedding(self, modality: str) -> Embedding:
        return self.vision_embed if modality == "vision" else self.language_embed


@dataclass(frozen=True)
class AttentionMaps:
    a_self_heads: np.ndarray          # (heads, n, n)
    a_self: np.ndarray                # head average, (n, n)
    a_token: np.ndarray | None = None         # (K, n)
    a_token_sparse: np.ndarray | None = None  # (K, n)


def _gauss(rng, fan_in, shape):
    return rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=shape)


def _block(rng, d: int, ffn_mult: int, cross_ctx: int | None) -> BlockWeights:
    h = d * ffn_mult
    cross = None
    if cross_ctx is not None:
        cross = CrossWeights(np.ones(d), np.zeros(d), _gauss(rng, d, (d, d)),
                             _gauss(rng, cross_ctx, (cross_ctx, d)),
                             _gauss(rng, cross_ctx, (cross_ctx, d)), _gauss(rng, d, (d, d)))
    return BlockWeights(
        ln1_g=np.ones(d), ln1_b=np.zeros(d),
        wq=_gauss(rng, d, (d, d)), bq=np.zeros(d),
        wk=_gauss(rng, d, (d, d)), bk=np.zeros(d),
        wv=_gauss(rng, d, (d, d)), bv=np.zeros(d),
        wo=_gauss(rng, d, (d, d)), bo=np.zeros(d),
        ln2_g=np.ones(d), ln2_b=np.zeros(d),
        w1=_gauss(rng, d, (d, h)), b1=np.zeros(h),
        w2=_gauss(rng, h, (h, d)), b2=np.zeros(d),
        cross=cross,
    )


def init_weights(cfg: VltConfig) -> ModelWeights:
    """Seeded Gaussian weights with std ``1/sqrt(fan_in)``."""
    rng = np.random.default_rng([cfg.seed, 1001])
    vision_embed = Embedding(_gauss(rng, cfg.d_v, (cfg.d_v, cfg.d_v)),
                             rng.normal(0.0, 0.02, size=(cfg.n_patches, cfg.d_v)),
                             rng.normal(0.0, 1.0, size=cfg.d_v))
    language_embed = Embedding(_gauss(rng, cfg.d_l, (cfg.d_l, cfg.d_l)),
                               rng.normal(0.0, 0.02, size=(cfg.n_words, cfg.d_l)),
                               rng.normal(0.0, 1.0, size=cfg.d_l))
    vision = [_block(rng, cfg.d_v, cfg.ffn_mult, None) for _ in range(cfg.layers)]
    ctx = cfg.d_v if cfg.cross_attention else None
    language = [_block(rng, cfg.d_l, cfg.ffn_mult, ctx) for _ in range(cfg.layers)]
    head_w = _gauss(rng, cfg.d_v + cfg.d_l, (cfg.d_v + cfg.d_l, 2))
    return ModelWeights(vision_embed, language_embed, vision, language, head_w, np.zeros(2))


def layer_norm(x: np.ndarray, g: np.ndarray, b: np.ndarray) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + LN_EPS) * g + b


def gelu(x: np.ndarray) -> np.ndarray:
    # tanh approximation
    return 0.5 * x * (1.0 + np.tanh(math.sqrt(2.0 / math.pi) * (x + 0.044715 * x ** 3)))


def tokenize(raw, modality: str, cfg: VltConfig, weights: ModelWeights) -> TokenBatch:
    """Embed raw per-instance features and prepend the special token.

    ``raw`` is a sequence of ``(N, d_v)`` (vision) or ``(M, d_l)`` (language)
    arrays, one per instance.
    """
    n = cfg.n_patches if modality == "vision" else cfg.n_words
    d = cfg.d_v if modality == "vision" else cfg.d_l
    emb = weights.embedding(modality)
    rows, origin = [], []
    for i, feats in enumerate(raw):
        feats = np.asarray(feats, dtype=np.float64)
        if feats.shape != (n, d):
            raise InvalidArgument(f"{modality} instance {i}: expected shape {(n, d)}, got {feats.shape}")
        x = feats @ emb.w + emb.pos
        rows.append(np.vstack([emb.special[None, :], x]))
        origin.append(np.arange(n + 1))
    if not rows:
        raise InvalidArgument("empty batch")
    return TokenBatch(tuple(rows), tuple(origin), modality, n + 1)


def _split_heads(x: np.ndarray, heads: int) -> np.ndarray:
    n, d = x.shape
    return x.reshape(n, heads, d // heads).transpose(1, 0, 2)


def _self_attention(x: np.ndarray, w: BlockWeights, heads: int):
    n, d = x.shape
    h = layer_norm(x, w.ln1_g, w.ln1_b)
    q = _split_heads(h @ w.wq + w.bq, heads)
    k = _split_heads(h @ w.wk + w.bk, heads)
    v = _split_heads(h @ w.wv + w.bv, heads)
    logits = q @ k.transpose(0, 2, 1) / math.sqrt(d // heads)
    attn = softmax_rows(logits.reshape(heads * n, n)).reshape(heads, n, n)
    ctx = (attn @ v).transpose(1, 0, 2).reshape(n, d)
    return x + ctx @ w.wo + w.bo, attn


def mhsa_forward(tokens: TokenBatch, weights: BlockWeights, heads: int):
    """Residual multi-head self attention; returns ``(batch, [AttentionMaps])``."""
    if tokens.width % heads or weights.wq.shape[0] != tokens.width:
        raise InvalidArgument(
            f"token width {tokens.width} incompatible with {heads} heads / weights {weights.wq.shape}")
    out, maps = [], []
    for x in tokens.tokens:
        y, attn = _self_attention(x, weights, heads)
        out.append(y)
        maps.append(AttentionMaps(attn, attn.mean(axis=0)))
    return tokens.with_tokens(out), maps


def ffn_forward(tokens: TokenBatch, weights: BlockWeights) -> TokenBatch:
    if weights.w1.shape[0] != tokens.width:
        raise InvalidArgument(f"FFN expects width {weights.w1.shape[0]}, got {tokens.width}")
    out = []
    for x in tokens.tokens:
        h = layer_norm(x, weights.ln2_g, weights.ln2_b)
        out.append(x + gelu(h @ weights.w1 + weights.b1) @ weights.w2 + weights.b2)
    return tokens.with_tokens(out)


def cross_attention_forward(queries: TokenBatch, context: TokenBatch, weights: BlockWeights,
                            heads: int, enabled: bool = True) -> TokenBatch:
    """Residual cross attention of ``queries`` onto ``context`` (per instance)."""
    cw = weights.cross
    if not enabled or cw is None:
        raise UnsupportedOperation("cross attention is disabled in this configuration")
    if queries.batch_size != context.batch_size:
        raise InvalidArgument("query and context batches differ in size")
    if cw.wk.shape[0] != context.width or cw.wq.shape[0] != queries.width:
        raise InvalidArgument("cross-attention weights do not fit the token widths")
    out = []
    d = queries.width
    for x, c in zip(queries.tokens, context.tokens):
        h = layer_norm(x, cw.ln_g, cw.ln_b)
        q = _split_heads(h @ cw.wq, heads)
        k = _split_heads(c @ cw.wk, heads)
        v = _split_heads(c @ cw.wv, heads)
        logits = q @ k.transpose(0, 2, 1) / math.sqrt(d // heads)
        nq, nc = x.shape[0], c.shape[0]
        attn = softmax_rows(logits.reshape(heads * nq, nc)).reshape(heads, nq, nc)
        out.append(x + (attn @ v).transpose(1, 0, 2).reshape(nq, d) @ cw.wo)
    return queries.with_tokens(out)


@dataclass
class LayerReport:
    layer: int
    modality: str
    records: list                 # LayerRecord per instance
    maps: list                    # AttentionMaps per instance
    alignment: list = field(default_factory=list)  # AlignmentOutput per instance
    decisions: list = field(default_factory=list)
    gflops: list = field(default_factory=list)


MagHandle = Callable[[TokenBatch, int], list]
DtpHandle = Callable[[TokenBatch, list, int], tuple]


def block_forward(tokens: TokenBatch, weights: BlockWeights, layer_index: int,
                  mag_handle: MagHandle | None, dtp_handle: DtpHandle | None, heads: int,
                  context: TokenBatch | None = None, flops_model=None):
    """MHSA, guidance query, pruning, optional cross attention, FFN.

    ``mag_handle(batch, layer)`` returns per-instance objects with ``a_token``;
    ``dtp_handle(batch, maps, layer)`` returns ``(batch, decisions)``. A missing
    handle is an identity pass.
    """
    if layer_index < 0:
        raise InvalidArgument(f"invalid layer index {layer_index}")
    n_in = tokens.counts()
    x, maps = mhsa_forward(tokens, weights, heads)
    alignment = mag_handle(x, layer_index) if mag_handle is not None else []
    if alignment:
        maps = [replace(m, a_token=a.a_token) for m, a in zip(maps, alignment)]
    decisions = []
    if dtp_handle is not None:
        x, decisions = dtp_handle(x, maps, layer_index)
    if context is not None:
        x = cross_attention_forward(x, context, weights, heads)
    x = ffn_forward(x, weights)

    records, gflops = [], []
    n_out = x.counts()
    for b in range(x.batch_size):
        dec = decisions[b] if decisions else None
        origin = x.origin[b]
        merged = dec is not None and dec.merged is not None
        kept = origin[:-1] if merged else origin
        records.append(LayerRecord(
            branch=tokens.modality, layer=layer_index, n_in=n_in[b], n_out=n_out[b],
            theta=None if dec is None or not math.isfinite(dec.theta) else dec.theta,
            kept=tuple(kept), merged=merged))
        if flops_model is not None:
            n_ctx = context.counts()[b] if context is not None else None
            gflops.append(budget.layer_flops(flops_model, tokens.modality, n_in[b], n_out[b],
                                             n_ctx) / 1e9)
    return x, LayerReport(layer_index, tokens.modality, records, maps, alignment, decisions, gflops)


def make_dtp_handle(cfg: VltConfig, temperature: float, enabled: bool) -> DtpHandle | None:
    """Pruning handle for one branch; ``None`` (identity) when pruning is off."""
    if not enabled:
        return None

    def handle(batch: TokenBatch, maps, layer):
        out, decisions = prune(batch, [m.a_self for m in maps], [m.a_token for m in maps],
                               temperature, cfg.keep_policy, cfg.tis_components, enabled)
        return out, decisions
    return handle


def make_mag_handle(mag: Mag) -> MagHandle:
    def handle(batch: TokenBatch, layer):
        return [mag(x, batch.modality, layer) for x in batch.tokens]
    return handle


@dataclass
class ForwardResult:
    vision: TokenBatch
    language: TokenBatch
    alignment: list      # per layer: (E^v list, E^l list, mean loss)
    report: PruneReport
    layers: list         # LayerReport for every (layer, branch)
    sim_loss_layers: str = "mean"

    @property
    def sim_loss(self) -> float:
        if self.sim_loss_layers == "last":
            return float(self.alignment[-1][2])
        return float(np.mean([a[2] for a in self.alignment]))


def model_forward(image_raw, text_raw, cfg: VltConfig, weights: ModelWeights, mag: Mag,
                  temperature: float | None = None, dtp_factory=None, flops_model=None,
                  instance_ids=None) -> ForwardResult:
    """Run both branches layer by layer.

    The shared guidance module is queried inside every block of both branches;
    pruning follows ``cfg`` unless ``dtp_factory(modality, layer)`` supplies
    another handle (used by the static baseline).
    """
    temperature = cfg.temperature if temperature is None else temperature
    if flops_model is None:
        flops_model = budget.FlopsModel.from_config(cfg)
    v = tokenize(image_raw, "vision", cfg, weights)
    t = tokenize(text_raw, "language", cfg, weights)
    if v.batch_size != t.batch_size:
        raise InvalidArgument("image and text batches differ in size")
    mag_handle = make_mag_handle(mag)
    handles = {m: make_dtp_handle(cfg, temperature, cfg.prunes(m)) for m in ("vision", "language")}

    alignment, layer_reports = [], []
    per_instance = [[] for _ in range(v.batch_size)]
    for layer in range(cfg.layers):
        dv = dtp_factory("vision", layer) if dtp_factory else handles["vision"]
        dl = dtp_factory("language", layer) if dtp_factory else handles["language"]
        v, rep_v = block_forward(v, weights.vision[layer], layer, mag_handle, dv,
                                 cfg.heads, flops_model=flops_model)
        ctx = v if cfg.cross_attention else None
        t, rep_t = block_forward(t, weights.language[layer], layer, mag_handle, dl,
                                 cfg.heads, context=ctx, flops_model=flops_model)
        e_v = [a.features for a in rep_v.alignment]
        e_l = [a.features for a in rep_t.alignment]
        loss = float(np.mean([alignment_loss(a, b) for a, b in zip(e_v, e_l)]))
        alignment.append((e_v, e_l, loss))
        layer_reports += [rep_v, rep_t]
        for b in range(v.batch_size):
            per_instance[b] += [rep_v.records[b], rep_t.records[b]]

    ids = list(range(v.batch_size)) if instance_ids is None else list(instance_ids)
    instances = [
        InstanceReport(index=ids[b], layers=tuple(per_instance[b]),
                       gflops=budget.model_flops(per_instance[b], flops_model))
        for b in range(v.batch_size)
    ]
    report = PruneReport(instances=instances, temperature=temperature,
                         baseline_gflops=budget.baseline_flops(flops_model, cfg.n_patches,
                                                               cfg.n_words))
    return ForwardResult(v, t, alignment, report, layer_reports, cfg.sim_loss_layers)


def classify(result: ForwardResult, weights: ModelWeights) -> np.ndarray:
    """Two-way logits from [vision CLS ; language EOS] final tokens."""
    feats = np.stack([np.concatenate([x[0], y[0]])
                      for x, y in zip(result.vision.tokens, result.language.tokens)])
    return feats @ weights.head_w + weights.head_b
