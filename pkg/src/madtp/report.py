"""Prune reports and their round-trip-safe text serialisation.

A report is JSON with a fixed key order. Floats are printed with 17
significant digits so parsing a report gives back bit-identical values.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

from .budget import COUNTING_CONVENTION
from .errors import InvalidArgument

REPORT_SCHEMA = "madtp-report"
REPORT_VERSION = 1

# Every choice this build makes where the method description is silent.
DECISION_LEDGER = (
    "scores: per-token max taken over the columns of A_self / A_token (attention received)",
    "scores: special tokens take part in the normalisation sums, but are never pruned",
    "threshold: keep iff TIS > theta; values within 1e-12 relative of theta count as ties (pruned)",
    "threshold: if no content token survives, the highest-TIS one is force-kept (lowest index on ties)",
    "merge: pruned tokens fused by TIS weights, appended after kept tokens, prunable later",
    "merge: fused token reports the max TIS of its constituents",
    "policy: mean-keep rounds half up, floored at specials + 1",
    "controller: T <- clamp(T * (measured/target)^eta, [t_min, t_max])",
    "A_self: head-averaged before scoring",
    f"flops: {COUNTING_CONVENTION}",
)


@dataclass(frozen=True)
class LayerRecord:
    branch: str
    layer: int
    n_in: int
    n_out: int
    theta: float | None
    kept: tuple
    merged: bool

    def __post_init__(self):
        object.__setattr__(self, "kept", tuple(int(i) for i in self.kept))
        if self.n_out != len(self.kept) + int(self.merged):
            raise InvalidArgument(
                f"{self.branch} layer {self.layer}: n_out={self.n_out} but "
                f"{len(self.kept)} kept + merged={self.merged}")


@dataclass(frozen=True)
class InstanceReport:
    index: int
    layers: tuple
    gflops: float | None = None
    difficulty: int | None = None

    def branch(self, name: str) -> list:
        return sorted((r for r in self.layers if r.branch == name), key=lambda r: r.layer)

    def alive_counts(self, name: str) -> list:
        """Token count entering the first layer, then after every layer."""
        recs = self.branch(name)
        return [recs[0].n_in] + [r.n_out for r in recs] if recs else []


@dataclass
class PruneReport:
    config: dict = field(default_factory=dict)
    instances: list = field(default_factory=list)
    dataset_gflops: float | None = None
    baseline_gflops: float | None = None
    temperature: float | None = None
    ledger: tuple = DECISION_LEDGER

    @property
    def reduce_ratio(self) -> float | None:
        if self.dataset_gflops is None or not self.baseline_gflops:
            return None
        return 1.0 - self.dataset_gflops / self.baseline_gflops

    def to_dict(self) -> dict:
        return {
            "schema": REPORT_SCHEMA,
            "version": REPORT_VERSION,
            "counting": COUNTING_CONVENTION,
            "ledger": list(self.ledger),
            "config": self.config,
            "temperature": self.temperature,
            "baseline_gflops": self.baseline_gflops,
            "dataset_gflops": self.dataset_gflops,
            "reduce_ratio": self.reduce_ratio,
            "instances": [
                {
                    "index": inst.index,
                    "difficulty": inst.difficulty,
                    "gflops": inst.gflops,
                    "layers": [
                        {
                            "branch": r.branch, "layer": r.layer, "n_in": r.n_in,
                            "n_out": r.n_out, "theta": r.theta, "merged": r.merged,
                            "kept": list(r.kept),
                        }
                        for r in inst.layers
                    ],
                }
                for inst in self.instances
            ],
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "PruneReport":
        if raw.get("schema") != REPORT_SCHEMA or raw.get("version") != REPORT_VERSION:
            raise InvalidArgument("not a version-1 madtp report")
        instances = []
        for inst in raw["instances"]:
            layers = tuple(LayerRecord(**rec) for rec in inst["layers"])
            instances.append(InstanceReport(index=inst["index"], layers=layers,
                                            gflops=inst["gflops"],
                                            difficulty=inst["difficulty"]))
        return cls(config=raw["config"], instances=instances,
                   dataset_gflops=raw["dataset_gflops"],
                   baseline_gflops=raw["baseline_gflops"],
                   temperature=raw["temperature"], ledger=tuple(raw["ledger"]))

    def dumps(self) -> str:
        return dumps(self.to_dict()) + "\n"

    @classmethod
    def loads(cls, text: str) -> "PruneReport":
        return cls.from_dict(json.loads(text))


def _number(x: float) -> str:
    if not math.isfinite(x):
        raise InvalidArgument(f"cannot serialise non-finite value {x}")
    text = format(x, ".17g")
    # keep integral values typed as reals when the text is parsed back
    return text if any(c in text for c in ".en") else text + ".0"


def _scalar(obj) -> bool:
    return obj is None or isinstance(obj, (bool, int, float, str))


def dumps(obj, indent: int = 0) -> str:
    """JSON text with 17-significant-digit floats and insertion key order."""
    pad = "  " * (indent + 1)
    if obj is None or isinstance(obj, bool):
        return json.dumps(obj)
    if isinstance(obj, int):
        return str(obj)
    if isinstance(obj, float):
        return _number(obj)
    if isinstance(obj, str):
        return json.dumps(obj)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{pad}{json.dumps(str(k))}: {dumps(v, indent + 1)}" for k, v in obj.items()]
        return "{\n" + ",\n".join(items) + "\n" + "  " * indent + "}"
    if isinstance(obj, (list, tuple)):
        if all(_scalar(v) for v in obj):
            return "[" + ", ".join(dumps(v) for v in obj) + "]"
        items = [pad + dumps(v, indent + 1) for v in obj]
        return "[\n" + ",\n".join(items) + "\n" + "  " * indent + "]"
    if hasattr(obj, "item"):
        return dumps(obj.item(), indent)
    raise InvalidArgument(f"cannot serialise {type(obj).__name__}")
