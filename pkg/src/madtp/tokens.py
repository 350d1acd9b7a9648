from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import InvalidArgument

MODALITIES = ("vision", "language")
MERGED = -1  # origin marker for a fused token


@dataclass(frozen=True)
class TokenBatch:
    """Variable-length token sequences for a batch of instances.

    ``tokens[b]`` is an ``(n_b, width)`` array whose row 0 is the special token
    (V_cls or L_eos). ``origin[b][i]`` is the original position of row ``i``, or
    ``MERGED`` for a token produced by fusing pruned tokens.
    """

    tokens: tuple
    origin: tuple
    modality: str
    n_original: int
    specials: tuple = (0,)

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise InvalidArgument(f"unknown modality {self.modality!r}")
        object.__setattr__(self, "tokens", tuple(self.tokens))
        object.__setattr__(self, "origin", tuple(np.asarray(o, dtype=np.int64) for o in self.origin))
        if len(self.tokens) != len(self.origin):
            raise InvalidArgument("tokens and origin disagree on batch size")
        for x, o in zip(self.tokens, self.origin):
            if x.ndim != 2 or x.shape[0] != o.shape[0]:
                raise InvalidArgument(f"token matrix {x.shape} does not match origin {o.shape}")
            if x.shape[0] < len(self.specials):
                raise InvalidArgument("sequence shorter than its special tokens")

    @property
    def batch_size(self) -> int:
        return len(self.tokens)

    @property
    def width(self) -> int:
        return self.tokens[0].shape[1]

    def counts(self) -> list:
        return [x.shape[0] for x in self.tokens]

    def alive_mask(self, b: int) -> np.ndarray:
        mask = np.zeros(self.n_original, dtype=bool)
        o = self.origin[b]
        mask[o[o >= 0]] = True
        return mask

    def with_tokens(self, tokens) -> "TokenBatch":
        return replace(self, tokens=tuple(tokens))
