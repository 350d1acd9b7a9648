"""Model and run configuration, with a versioned JSON file format."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .errors import InvalidArgument

CONFIG_SCHEMA = "madtp-config"
CONFIG_VERSION = 1

KEEP_POLICIES = ("max-keep", "mean-keep", "per-instance")
MODALITY_SCOPES = ("both", "vision", "language")
TIS_COMPONENTS = ("cls", "self", "token")
MODES = ("simulate", "calibrate", "stp", "ingest", "train-toy", "report")


@dataclass(frozen=True)
class VltConfig:
    layers: int = 4
    d_v: int = 64
    d_l: int = 64
    heads: int = 4
    n_patches: int = 64
    n_words: int = 16
    n_learnable: int = 100
    d_k: int = 768
    alpha: float = 0.1
    temperature: float = 1.0
    target_ratio: float = 0.5
    ffn_mult: int = 4
    seed: int = 0
    pruning: bool = True
    keep_policy: str = "max-keep"
    cross_attention: bool = False
    modality_scope: str = "both"
    tis_components: tuple = TIS_COMPONENTS
    # "mean" averages the alignment loss over layers, "last" uses only the final layer
    sim_loss_layers: str = "mean"

    def __post_init__(self):
        # JSON round trips hand back lists
        object.__setattr__(self, "tis_components", tuple(self.tis_components))
        self.validate()

    def validate(self):
        for name in ("layers", "d_v", "d_l", "heads", "n_patches", "n_words",
                     "n_learnable", "d_k", "ffn_mult"):
            value = getattr(self, name)
            if not isinstance(value, int) or isinstance(value, bool) or value < 1:
                raise InvalidArgument(f"{name} must be a positive integer, got {value!r}")
        if self.d_v % self.heads or self.d_l % self.heads:
            raise InvalidArgument(
                f"widths ({self.d_v}, {self.d_l}) must be divisible by heads={self.heads}")
        if not self.temperature > 0:
            raise InvalidArgument(f"temperature must be positive, got {self.temperature}")
        if self.alpha < 0:
            raise InvalidArgument(f"alpha must be non-negative, got {self.alpha}")
        if not 0.0 <= self.target_ratio < 1.0:
            raise InvalidArgument(f"target_ratio must lie in [0, 1), got {self.target_ratio}")
        if self.keep_policy not in KEEP_POLICIES:
            raise InvalidArgument(f"keep_policy must be one of {KEEP_POLICIES}")
        if self.modality_scope not in MODALITY_SCOPES:
            raise InvalidArgument(f"modality_scope must be one of {MODALITY_SCOPES}")
        if not self.tis_components or any(c not in TIS_COMPONENTS for c in self.tis_components):
            raise InvalidArgument(f"tis_components must be a non-empty subset of {TIS_COMPONENTS}")
        if self.sim_loss_layers not in ("mean", "last"):
            raise InvalidArgument("sim_loss_layers must be 'mean' or 'last'")

    def prunes(self, modality: str) -> bool:
        return self.pruning and self.modality_scope in ("both", modality)


@dataclass(frozen=True)
class DataConfig:
    """Synthetic workload: planted cross-modal concepts on Gaussian noise."""

    n_concepts: int = 12
    min_planted: int = 0
    max_planted: int = 6
    patches_per_concept: int = 8
    words_per_concept: int = 2
    amplitude: float = 3.0
    noise_scale: float = 1.0
    match_prob: float = 0.5


@dataclass(frozen=True)
class ControllerConfig:
    eta: float = 0.5
    t_min: float = 1e-3
    t_max: float = 1e3
    max_iters: int = 50
    tolerance: float = 0.05


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 200
    lr: float = 0.05
    batch_size: int = 16


@dataclass(frozen=True)
class RunConfig:
    model: VltConfig = field(default_factory=VltConfig)
    data: DataConfig = field(default_factory=DataConfig)
    controller: ControllerConfig = field(default_factory=ControllerConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    mode: str = "simulate"
    dataset_size: int = 64
    batch_size: int = 32
    data_seed: int = 1
    out_dir: str = "out"
    stp_k: int = 0
    sorted_inference: bool = False
    include_overhead: bool = False

    def __post_init__(self):
        if self.mode not in MODES:
            raise InvalidArgument(f"mode must be one of {MODES}")
        if self.dataset_size < 0:
            raise InvalidArgument("dataset_size must be non-negative")
        if self.batch_size < 1:
            raise InvalidArgument("batch_size must be positive")
        if self.stp_k < 0:
            raise InvalidArgument("stp_k must be non-negative")

    def with_model(self, **changes) -> "RunConfig":
        return replace(self, model=replace(self.model, **changes))


_SECTIONS = {"model": VltConfig, "data": DataConfig, "controller": ControllerConfig,
             "train": TrainConfig}


def _build(cls, raw: dict, where: str):
    if not isinstance(raw, dict):
        raise InvalidArgument(f"{where} must be an object")
    known = {f.name for f in fields(cls)}
    unknown = set(raw) - known
    if unknown:
        raise InvalidArgument(f"unknown keys in {where}: {sorted(unknown)}")
    try:
        return cls(**raw)
    except TypeError as exc:
        raise InvalidArgument(f"bad {where}: {exc}") from exc


def config_to_dict(config: RunConfig) -> dict:
    body = asdict(config)
    body["model"]["tis_components"] = list(config.model.tis_components)
    return {"schema": CONFIG_SCHEMA, "version": CONFIG_VERSION, **body}


def config_from_dict(raw: dict) -> RunConfig:
    if raw.get("schema") != CONFIG_SCHEMA:
        raise InvalidArgument(f"config schema must be {CONFIG_SCHEMA!r}")
    if raw.get("version") != CONFIG_VERSION:
        raise InvalidArgument(f"unsupported config version {raw.get('version')!r}")
    body = {k: v for k, v in raw.items() if k not in ("schema", "version")}
    for key, cls in _SECTIONS.items():
        if key in body:
            body[key] = _build(cls, body[key], key)
    return _build(RunConfig, body, "config")


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise InvalidArgument(f"{path}: not valid JSON ({exc})") from exc
    return config_from_dict(raw)


def save_config(config: RunConfig, path) -> None:
    Path(path).write_text(json.dumps(config_to_dict(config), indent=2) + "\n")
