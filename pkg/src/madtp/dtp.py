"""Dynamic token pruning.

Per instance and per layer: three attention-derived scores are averaged into a
token importance score (TIS); the learnable tokens' attention, sharpened by a
temperature and projected with sparsemax, turns TIS into K candidate
thresholds whose minimum decides which tokens survive. Pruned tokens are fused
into one replacement token. A batch policy can then equalise kept counts
across the mini-batch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgument
from .numerics import sparsemax_rows
from .tokens import MERGED, TokenBatch

TIE_RTOL = 1e-12


@dataclass(frozen=True)
class TokenImportance:
    s_cls: np.ndarray
    s_self: np.ndarray
    s_token: np.ndarray
    tis: np.ndarray


@dataclass(frozen=True)
class PruneDecision:
    theta: float
    keep: np.ndarray          # bool over the rows that entered the layer
    merged: np.ndarray | None
    merged_tis: float | None
    importance: TokenImportance | None = None

    @property
    def kept_count(self) -> int:
        return int(self.keep.sum())

    @property
    def n_out(self) -> int:
        return self.kept_count + (self.merged is not None)


def _normalise(v: np.ndarray) -> np.ndarray:
    total = v.sum()
    if total <= 0:
        return np.full_like(v, 1.0 / v.size)
    return v / total


def _square(a, name) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1] or a.shape[0] == 0:
        raise InvalidArgument(f"{name} must be a non-empty square map, got {a.shape}")
    return a


def class_attention_score(a_self, cls_index: int = 0) -> np.ndarray:
    a = _square(a_self, "A_self")
    if not 0 <= cls_index < a.shape[0]:
        raise InvalidArgument(f"cls index {cls_index} outside 0..{a.shape[0] - 1}")
    return _normalise(a[cls_index].copy())


def self_attention_score(a_self) -> np.ndarray:
    """Largest attention each token receives from any query, normalised."""
    a = _square(a_self, "A_self")
    return _normalise(a.max(axis=0))


def token_attention_score(a_token) -> np.ndarray:
    """Largest attention each token receives from any learnable token, normalised."""
    a = np.asarray(a_token, dtype=np.float64)
    if a.ndim != 2 or a.shape[1] == 0 or a.shape[0] == 0:
        raise InvalidArgument(f"A_token must be a non-empty K x n map, got {a.shape}")
    return _normalise(a.max(axis=0))


def fuse_tis(s_cls, s_self, s_token, components=("cls", "self", "token")) -> np.ndarray:
    """Mean of the enabled score components."""
    parts = {"cls": np.asarray(s_cls, dtype=np.float64),
             "self": np.asarray(s_self, dtype=np.float64),
             "token": np.asarray(s_token, dtype=np.float64)}
    if len({p.shape for p in parts.values()}) != 1:
        raise InvalidArgument("score vectors differ in length")
    chosen = [parts[c] for c in components]
    if not chosen:
        raise InvalidArgument("no score component enabled")
    total = chosen[0]
    for p in chosen[1:]:
        total = total + p
    return total / len(chosen)


def token_importance(a_self, a_token, cls_index: int = 0,
                     components=("cls", "self", "token")) -> TokenImportance:
    s_cls = class_attention_score(a_self, cls_index)
    s_self = self_attention_score(a_self)
    s_token = token_attention_score(a_token)
    if s_token.shape != s_self.shape:
        raise InvalidArgument(
            f"A_token covers {s_token.size} tokens but A_self covers {s_self.size}")
    return TokenImportance(s_cls, s_self, s_token, fuse_tis(s_cls, s_self, s_token, components))


def sparse_token_attention(a_token, temperature: float) -> np.ndarray:
    if not temperature > 0:
        raise InvalidArgument(f"temperature must be positive, got {temperature}")
    return sparsemax_rows(temperature * np.asarray(a_token, dtype=np.float64))


def threshold(a_sparse, tis) -> float:
    """Smallest of the K sparse-attention-weighted averages of TIS."""
    a = np.asarray(a_sparse, dtype=np.float64)
    t = np.asarray(tis, dtype=np.float64)
    if a.ndim != 2 or a.shape[1] != t.shape[0]:
        raise InvalidArgument(f"sparse map {a.shape} does not match TIS of length {t.shape[0]}")
    return float(np.min(a @ t))


def prune_mask(tis, theta: float, specials=(0,)) -> np.ndarray:
    """Keep tokens whose TIS exceeds ``theta``; specials always survive.

    If no non-special token survives, the non-special with the largest TIS
    (lowest index on ties) is kept so the content sequence never empties.
    """
    t = np.asarray(tis, dtype=np.float64)
    keep = t > theta + TIE_RTOL * abs(theta)
    special = np.zeros(t.size, dtype=bool)
    special[list(specials)] = True
    keep |= special
    if not np.any(keep & ~special) and np.any(~special):
        candidates = np.where(special, -np.inf, t)
        keep[int(np.argmax(candidates))] = True
    return keep


def merge_pruned(tokens, tis, keep):
    """TIS-weighted mean of the pruned rows, or ``None`` if nothing was pruned."""
    x = np.asarray(tokens, dtype=np.float64)
    t = np.asarray(tis, dtype=np.float64)
    keep = np.asarray(keep, dtype=bool)
    if x.shape[0] != t.size or t.size != keep.size:
        raise InvalidArgument("tokens, TIS and mask lengths differ")
    pruned = ~keep
    if not np.any(pruned):
        return None
    w = t[pruned]
    if w.sum() <= 0:
        return x[pruned].mean(axis=0)
    return (w @ x[pruned]) / w.sum()


def _top_keep(tis: np.ndarray, count: int, specials) -> np.ndarray:
    keep = np.zeros(tis.size, dtype=bool)
    keep[list(specials)] = True
    rest = count - len(specials)
    if rest > 0:
        ranked = np.where(keep, -np.inf, tis)
        order = np.argsort(-ranked, kind="stable")
        keep[order[:rest]] = True
    return keep


def apply_policy(masks, tis_batch, policy: str, specials=(0,)) -> list:
    """Equalise kept counts across a mini-batch.

    max-keep uses the largest per-instance count, mean-keep the rounded-half-up
    mean (at least specials + 1); instances grow or shrink their own kept set
    by TIS rank. per-instance leaves masks alone.
    """
    masks = [np.asarray(m, dtype=bool) for m in masks]
    if not masks:
        raise InvalidArgument("apply_policy needs a non-empty batch")
    if policy == "per-instance":
        return masks
    counts = [int(m.sum()) for m in masks]
    if policy == "max-keep":
        target = max(counts)
    elif policy == "mean-keep":
        target = max(int(np.floor(np.mean(counts) + 0.5)), len(specials) + 1)
    else:
        raise InvalidArgument(f"unknown keep policy {policy!r}")
    out = []
    for mask, tis, count in zip(masks, tis_batch, counts):
        n_target = min(target, mask.size)
        if count == n_target:
            out.append(mask)
            continue
        tis = np.asarray(tis, dtype=np.float64)
        if count < n_target:
            ranked = np.where(mask, np.inf, tis)
        else:
            special = np.zeros(mask.size, dtype=bool)
            special[list(specials)] = True
            ranked = np.where(special, np.inf, np.where(mask, tis, -np.inf))
        order = np.argsort(-ranked, kind="stable")
        new = np.zeros(mask.size, dtype=bool)
        new[order[:n_target]] = True
        out.append(new)
    return out


def _rebuild(tokens: TokenBatch, masks, tis_list, merge: bool):
    new_x, new_o, merged_out = [], [], []
    for x, o, keep, tis in zip(tokens.tokens, tokens.origin, masks, tis_list):
        merged = merge_pruned(x, tis, keep) if merge else None
        rows, origin = x[keep], o[keep]
        if merged is not None:
            rows = np.vstack([rows, merged[None, :]])
            origin = np.append(origin, MERGED)
        new_x.append(rows)
        new_o.append(origin)
        merged_out.append(merged)
    return TokenBatch(tuple(new_x), tuple(new_o), tokens.modality, tokens.n_original,
                      tokens.specials), merged_out


def prune(tokens: TokenBatch, a_self, a_token, temperature: float, policy: str = "per-instance",
          components=("cls", "self", "token"), enabled: bool = True):
    """One pruning step for a batch; returns ``(pruned batch, decisions)``.

    ``a_self[b]`` is the head-averaged self-attention of instance ``b`` and
    ``a_token[b]`` its ``(K, n_b)`` token attention map.
    """
    specials = tokens.specials
    importances, thetas, masks = [], [], []
    for b in range(tokens.batch_size):
        n = tokens.tokens[b].shape[0]
        if a_self[b].shape != (n, n):
            raise InvalidArgument(f"instance {b}: A_self {a_self[b].shape} but {n} tokens")
        imp = token_importance(a_self[b], a_token[b], specials[0], components)
        theta = threshold(sparse_token_attention(a_token[b], temperature), imp.tis)
        importances.append(imp)
        thetas.append(theta)
        masks.append(prune_mask(imp.tis, theta, specials) if enabled
                     else np.ones(n, dtype=bool))
    tis_list = [imp.tis for imp in importances]
    if enabled:
        masks = apply_policy(masks, tis_list, policy, specials)
    pruned, merged = _rebuild(tokens, masks, tis_list, merge=enabled)
    decisions = [
        PruneDecision(theta=thetas[b], keep=masks[b], merged=merged[b],
                      merged_tis=None if merged[b] is None else float(tis_list[b][~masks[b]].max()),
                      importance=importances[b])
        for b in range(tokens.batch_size)
    ]
    return pruned, decisions


def prune_topk(tokens: TokenBatch, scores, keep_counts, merge: bool = False):
    """Fixed-count pruning: keep specials plus the highest-scoring rows.

    Used by static pruning (``keep = n - k``, no merge) and by count-matched
    comparisons against the dynamic rule.
    """
    masks = []
    for b, (score, count) in enumerate(zip(scores, keep_counts)):
        n = tokens.tokens[b].shape[0]
        if not len(tokens.specials) < count <= n:
            raise InvalidArgument(f"instance {b}: cannot keep {count} of {n} tokens")
        masks.append(_top_keep(np.asarray(score, dtype=np.float64), count, tokens.specials))
    pruned, merged = _rebuild(tokens, masks, scores, merge=merge)
    decisions = [
        PruneDecision(theta=float("nan"), keep=masks[b], merged=merged[b],
                      merged_tis=None if merged[b] is None
                      else float(np.asarray(scores[b])[~masks[b]].max()))
        for b in range(tokens.batch_size)
    ]
    return pruned, decisions
