"""Binary attention dumps for offline pruning replay.

Layout (little-endian)::

    8 bytes   magic "MADTPDMP"
    u32       version (1)
    u32       entry count
    per entry u32 branch id, u32 rows, u32 cols
    payload   float32, row-major, entries in declared order

The branch id packs the modality (bit 0: 0 vision, 1 language) and the map
kind (bit 1: 0 self attention, 1 token attention). Entries of one modality
appear in layer order; a token-attention entry belongs to the most recent
self-attention entry of the same modality.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..dtp import PruneDecision, prune_mask, sparse_token_attention, threshold, token_importance
from ..errors import CorruptFileError, FormatError, InvalidArgument, NonStochasticError

log = logging.getLogger(__name__)

MAGIC = b"MADTPDMP"
VERSION = 1
STOCHASTIC_ATOL = 1e-4
REPAIR_LIMIT = 1e-2

_MODALITIES = ("vision", "language")
_KINDS = ("self", "token")


def branch_id(modality: str, kind: str) -> int:
    if modality not in _MODALITIES or kind not in _KINDS:
        raise InvalidArgument(f"unknown map ({modality!r}, {kind!r})")
    return _MODALITIES.index(modality) | (_KINDS.index(kind) << 1)


def decode_branch(bid: int):
    if not 0 <= bid <= 3:
        raise CorruptFileError(f"unknown branch id {bid}")
    return _MODALITIES[bid & 1], _KINDS[bid >> 1]


@dataclass
class DumpEntry:
    modality: str
    kind: str
    matrix: np.ndarray


@dataclass
class LayerMaps:
    a_self: np.ndarray
    a_token: np.ndarray | None = None


@dataclass
class AttentionDump:
    entries: list = field(default_factory=list)

    def add(self, modality: str, kind: str, matrix) -> None:
        m = np.asarray(matrix)
        if m.ndim != 2:
            raise InvalidArgument(f"attention map must be 2-D, got shape {m.shape}")
        branch_id(modality, kind)
        self.entries.append(DumpEntry(modality, kind, m))

    def layers(self, modality: str) -> list:
        """Per-layer maps of one modality, in recorded order."""
        out = []
        for e in self.entries:
            if e.modality != modality:
                continue
            if e.kind == "self":
                out.append(LayerMaps(e.matrix))
            else:
                if not out or out[-1].a_token is not None:
                    raise CorruptFileError(
                        f"{modality} token-attention map without a preceding self-attention map")
                out[-1].a_token = e.matrix
        return out


def from_forward(result, instance: int) -> AttentionDump:
    """Dump the maps one instance saw in a forward pass, layer by layer."""
    dump = AttentionDump()
    for rep in result.layers:
        maps = rep.maps[instance]
        dump.add(rep.modality, "self", maps.a_self)
        if maps.a_token is not None:
            dump.add(rep.modality, "token", maps.a_token)
    return dump


def write_dump(dump: AttentionDump, path) -> None:
    parts = [MAGIC, struct.pack("<II", VERSION, len(dump.entries))]
    for e in dump.entries:
        rows, cols = e.matrix.shape
        parts.append(struct.pack("<III", branch_id(e.modality, e.kind), rows, cols))
    for e in dump.entries:
        parts.append(np.ascontiguousarray(e.matrix, dtype="<f4").tobytes())
    path = Path(path)
    try:
        path.write_bytes(b"".join(parts))
    except OSError as exc:
        raise OSError(f"{path}: cannot write attention dump ({exc})") from exc


def read_dump(path) -> AttentionDump:
    """Parse a dump without any stochasticity checks."""
    path = Path(path)
    data = path.read_bytes()
    if len(data) < 16 or data[:8] != MAGIC:
        raise FormatError(f"{path}: not an attention dump (bad magic)")
    version, count = struct.unpack_from("<II", data, 8)
    if version != VERSION:
        raise FormatError(f"{path}: unsupported dump version {version}")
    header_end = 16 + 12 * count
    if len(data) < header_end:
        raise CorruptFileError(
            f"{path}: header declares {count} entries needing {header_end} bytes, "
            f"file has {len(data)}")
    dims = [struct.unpack_from("<III", data, 16 + 12 * i) for i in range(count)]
    expected = header_end + 4 * sum(r * c for _, r, c in dims)
    if len(data) != expected:
        raise CorruptFileError(f"{path}: expected {expected} bytes, found {len(data)}")
    dump, offset = AttentionDump(), header_end
    for bid, rows, cols in dims:
        modality, kind = decode_branch(bid)
        m = np.frombuffer(data, dtype="<f4", count=rows * cols, offset=offset).reshape(rows, cols)
        dump.entries.append(DumpEntry(modality, kind, m.astype(np.float32)))
        offset += 4 * rows * cols
    return dump


def _enforce_stochastic(entry: DumpEntry, where: str) -> DumpEntry:
    m = entry.matrix.astype(np.float64)
    if not np.all(np.isfinite(m)) or np.any(m < 0):
        raise NonStochasticError(f"{where}: negative or non-finite attention weights")
    dev = np.abs(m.sum(axis=1) - 1.0)
    worst = float(dev.max()) if dev.size else 0.0
    if worst > REPAIR_LIMIT:
        raise NonStochasticError(f"{where}: row sums off by {worst:.3g} (limit {REPAIR_LIMIT})")
    if worst > STOCHASTIC_ATOL:
        log.warning("%s: row sums off by %.3g, renormalising", where, worst)
        m = m / m.sum(axis=1, keepdims=True)
    return DumpEntry(entry.modality, entry.kind, m)


def ingest_attention_dump(path) -> AttentionDump:
    """Read a dump and validate it for replay.

    Maps come back as float64. Rows off by more than 1e-4 (and at most 1e-2)
    are renormalised with a warning; worse rows are rejected.
    """
    raw = read_dump(path)
    checked = AttentionDump()
    for i, e in enumerate(raw.entries):
        rows, cols = e.matrix.shape
        if e.kind == "self" and rows != cols:
            raise CorruptFileError(f"{path}: entry {i} self-attention map is {rows}x{cols}")
        checked.entries.append(_enforce_stochastic(e, f"{path} entry {i}"))
    for modality in _MODALITIES:
        for layer, lm in enumerate(checked.layers(modality)):
            if lm.a_token is not None and lm.a_token.shape[1] != lm.a_self.shape[0]:
                raise CorruptFileError(
                    f"{path}: {modality} layer {layer} token map covers "
                    f"{lm.a_token.shape[1]} tokens, self map {lm.a_self.shape[0]}")
    return checked


def replay(dump: AttentionDump, temperature: float, modality: str = "vision",
           components=("cls", "self", "token")) -> list:
    """Re-run the per-instance pruning decision on every recorded layer.

    Layers without a token-attention map fall back to ``A_self`` rows as
    guidance; the decision of each layer uses its own maps only.
    """
    out = []
    for lm in dump.layers(modality):
        a_token = lm.a_token if lm.a_token is not None else lm.a_self
        imp = token_importance(lm.a_self, a_token, 0, components)
        theta = threshold(sparse_token_attention(a_token, temperature), imp.tis)
        keep = prune_mask(imp.tis, theta)
        out.append(PruneDecision(theta=theta, keep=keep, merged=None,
                                 merged_tis=None if keep.all() else float(imp.tis[~keep].max()),
                                 importance=imp))
    return out
