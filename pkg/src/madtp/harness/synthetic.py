"""Synthetic image-text pairs with planted cross-modal concepts.

A dataset-wide bank holds paired concept directions, one in patch-feature
space and one in word-feature space. A pair of difficulty ``c`` draws ``c``
concepts; each is added to a random block of patches and to a few words.
Matched pairs plant the same concepts in both modalities, unmatched pairs use
disjoint concept sets. Everything else is unit Gaussian noise.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..config import DataConfig, VltConfig
from ..errors import InvalidArgument


@dataclass
class Dataset:
    images: np.ndarray          # (S, N, d_v)
    texts: np.ndarray           # (S, M, d_l)
    labels: np.ndarray          # (S,) 1 = matched
    difficulty: np.ndarray      # (S,) planted concept count
    planted_patches: list       # per pair, patch indices (0-based, before the special token)
    planted_words: list
    concepts: list              # per pair, (vision concept ids, language concept ids)

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "Dataset":
        idx = list(idx)
        return Dataset(self.images[idx], self.texts[idx], self.labels[idx],
                       self.difficulty[idx], [self.planted_patches[i] for i in idx],
                       [self.planted_words[i] for i in idx], [self.concepts[i] for i in idx])


def concept_bank(n_concepts: int, d_v: int, d_l: int, seed: int):
    rng = np.random.default_rng([seed, 2003])
    vis = rng.normal(size=(n_concepts, d_v))
    lang = rng.normal(size=(n_concepts, d_l))
    # rows scaled to norm sqrt(d) so coordinates match the unit noise
    vis *= np.sqrt(d_v) / np.linalg.norm(vis, axis=1, keepdims=True)
    lang *= np.sqrt(d_l) / np.linalg.norm(lang, axis=1, keepdims=True)
    return vis, lang


def gen_synthetic(model: VltConfig, data: DataConfig, size: int, seed: int,
                  difficulty=None) -> Dataset:
    """Generate ``size`` pairs; deterministic in ``seed``.

    ``difficulty`` forces the planted concept count for every pair.
    """
    n, m = model.n_patches, model.n_words
    lo, hi = (difficulty, difficulty) if difficulty is not None else (data.min_planted, data.max_planted)
    if hi * data.patches_per_concept > n or hi * data.words_per_concept > m:
        raise InvalidArgument("too many planted concepts for the token counts")
    if 2 * hi > data.n_concepts:
        raise InvalidArgument("concept bank too small for disjoint unmatched pairs")
    bank_v, bank_l = concept_bank(data.n_concepts, model.d_v, model.d_l, seed)
    rng = np.random.default_rng([seed, 2002])

    images = data.noise_scale * rng.normal(size=(size, n, model.d_v))
    texts = data.noise_scale * rng.normal(size=(size, m, model.d_l))
    labels = np.zeros(size, dtype=np.int64)
    diff = np.zeros(size, dtype=np.int64)
    planted_p, planted_w, concepts = [], [], []
    for s in range(size):
        c = int(rng.integers(lo, hi + 1))
        matched = c > 0 and rng.random() < data.match_prob
        ids = rng.permutation(data.n_concepts)
        vis_ids = ids[:c]
        lang_ids = vis_ids if matched else ids[c:2 * c]
        patches = rng.permutation(n)[:c * data.patches_per_concept].reshape(c, data.patches_per_concept)
        words = rng.permutation(m)[:c * data.words_per_concept].reshape(c, data.words_per_concept)
        for cid, p in zip(vis_ids, patches):
            images[s, p] += data.amplitude * bank_v[cid]
        for cid, w in zip(lang_ids, words):
            texts[s, w] += data.amplitude * bank_l[cid]
        labels[s] = int(matched)
        diff[s] = c
        planted_p.append(np.sort(patches.reshape(-1)))
        planted_w.append(np.sort(words.reshape(-1)))
        concepts.append((tuple(int(i) for i in vis_ids), tuple(int(i) for i in lang_ids)))
    return Dataset(images, texts, labels, diff, planted_p, planted_w, concepts)


def ground_truth(dataset: Dataset) -> dict:
    """Sidecar describing where concepts were planted (token positions, +1 for the special)."""
    return {
        "pairs": [
            {
                "label": int(dataset.labels[i]),
                "difficulty": int(dataset.difficulty[i]),
                "vision_concepts": list(dataset.concepts[i][0]),
                "language_concepts": list(dataset.concepts[i][1]),
                "vision_tokens": [int(p) + 1 for p in dataset.planted_patches[i]],
                "language_tokens": [int(w) + 1 for w in dataset.planted_words[i]],
            }
            for i in range(len(dataset))
        ]
    }
