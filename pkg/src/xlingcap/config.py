"""Run configuration: dataclasses, JSON loading, and --set overrides.

All knobs live in one JSON document with sections ``world``, ``model``,
``phase1``, ``phase2`` and ``infer``.  Unknown keys are rejected so a typo
cannot silently fall back to a default.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

from .errors import ContractError, FormatError


@dataclass
class DistortionSpec:
    """Hidden affine warp applied to image-modality encoded features."""
    scale: float = 0.55
    rotate: float = 0.45
    shift: float = 0.25

    def validate(self) -> None:
        if self.scale <= 0:
            raise ContractError("distortion scale must be positive")


@dataclass
class WorldConfig:
    seed: int = 0
    n_objects: int = 60
    n_relations: int = 12
    n_attributes: int = 12
    homonym_count: int = 10
    paraphrases_per_sentence: int = 4
    duplicate_triplet_rate: float = 0.3
    spurious_object_rate: float = 0.2
    attribute_drop_rate: float = 0.2
    embed_dim: int = 32
    homonym_scene_rate: float = 0.5
    homonym_cross_rate: float = 0.4   # share of homonym scenes where the
                                      # context word sits in another clause
    n_train: int = 2000
    n_val: int = 200
    n_test: int = 200
    n_images: int = 1000
    distortion: DistortionSpec = field(default_factory=DistortionSpec)

    def validate(self) -> None:
        if self.n_objects < 2 or self.n_relations < 2 or self.n_attributes < 2:
            raise ContractError("vocabulary sizes must be >= 2")
        if self.homonym_count >= self.n_objects:
            raise ContractError("homonym_count must be < n_objects")
        for name in ("duplicate_triplet_rate", "spurious_object_rate",
                     "attribute_drop_rate", "homonym_scene_rate",
                     "homonym_cross_rate"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ContractError(f"{name} must be in [0, 1]")
        if self.embed_dim < 2:
            raise ContractError("embed_dim must be >= 2")
        self.distortion.validate()


@dataclass
class ModelConfig:
    d_emb: int = 1000          # scene-graph embedding width
    d_att: int = 512           # additive-attention hidden width
    d_word: int = 1000         # decoder word-input embedding width
    lstm_hidden: int = 1000
    gate_hidden: int = 512     # hidden width of the 3-layer fusion gate
    gate_bias: float = 2.0     # initial word-level logit of the fusion gate
    context_scale: float = 0.1  # init scale of the two context projections
    max_len: int = 16
    variant: str = "gated"     # word | word_sub | concat | gated
    per_step_attention: bool = True

    def validate(self) -> None:
        if self.variant not in ("word", "word_sub", "concat", "gated"):
            raise ContractError(f"unknown mapping variant {self.variant!r}")
        for name in ("d_emb", "d_att", "d_word", "lstm_hidden",
                     "gate_hidden", "max_len"):
            if getattr(self, name) < 1:
                raise ContractError(f"{name} must be positive")


@dataclass
class Phase1Config:
    d_c: int = 100             # width of the distribution-alignment projection
    epochs_xe: int = 80
    epochs_joint: int = 20
    lr: float = 5e-5
    batch: int = 50
    use_kl: bool = True        # False = cross-entropy-only ablation
    augment_merge: bool = False

    def validate(self) -> None:
        if self.d_c < 2:
            raise ContractError("d_c must be >= 2")
        if self.epochs_xe < 0 or self.epochs_joint < 0:
            raise ContractError("epoch counts must be non-negative")
        if self.lr <= 0 or self.batch <= 0:
            raise ContractError("lr and batch must be positive")


@dataclass
class Phase2Config:
    lam: float = 10.0          # cycle-consistency weight
    gan_variant: str = "non_saturating"   # or "minimax"
    disc_hidden: int = 1000
    mapper_hidden: int = 1000
    epochs: int = 20
    lr: float = 5e-5
    batch: int = 50

    def validate(self) -> None:
        if self.lam < 0:
            raise ContractError("cycle weight must be >= 0")
        if self.gan_variant not in ("minimax", "non_saturating"):
            raise ContractError(f"unknown gan_variant {self.gan_variant!r}")
        if self.lr <= 0 or self.batch <= 0 or self.epochs < 0:
            raise ContractError("invalid phase-2 training settings")


@dataclass
class InferConfig:
    beam: int = 5
    use_cmm: bool = True

    def validate(self) -> None:
        if self.beam < 1:
            raise ContractError("beam must be >= 1")


@dataclass
class RunConfig:
    seed: int = 0
    world: WorldConfig = field(default_factory=WorldConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    phase1: Phase1Config = field(default_factory=Phase1Config)
    phase2: Phase2Config = field(default_factory=Phase2Config)
    infer: InferConfig = field(default_factory=InferConfig)

    def validate(self) -> None:
        self.world.validate()
        self.model.validate()
        self.phase1.validate()
        self.phase2.validate()
        self.infer.validate()


def _from_dict(cls, data: dict, path: str):
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(fields)
    if unknown:
        raise FormatError(f"unknown config key {path}/{sorted(unknown)[0]}")
    kwargs = {}
    for name, value in data.items():
        f = fields[name]
        if dataclasses.is_dataclass(f.type) or f.type in (
                "WorldConfig", "ModelConfig", "Phase1Config", "Phase2Config",
                "InferConfig", "DistortionSpec"):
            sub_cls = _SECTION_TYPES[name]
            if not isinstance(value, dict):
                raise FormatError(f"wrong type at {path}/{name}")
            kwargs[name] = _from_dict(sub_cls, value, f"{path}/{name}")
        else:
            kwargs[name] = value
    return cls(**kwargs)


_SECTION_TYPES = {
    "world": WorldConfig,
    "model": ModelConfig,
    "phase1": Phase1Config,
    "phase2": Phase2Config,
    "infer": InferConfig,
    "distortion": DistortionSpec,
}


def config_from_dict(data: dict) -> RunConfig:
    if not isinstance(data, dict):
        raise FormatError("config root must be an object")
    cfg = _from_dict(RunConfig, data, "")
    cfg.validate()
    return cfg


def config_to_dict(cfg: RunConfig) -> dict:
    return dataclasses.asdict(cfg)


def load_config(path) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as err:
            raise FormatError(f"{path}: invalid JSON: {err}") from err
    return config_from_dict(data)


def apply_overrides(data: dict, overrides: list[str]) -> dict:
    """Apply ``key.path=value`` overrides to a config dict (values are JSON)."""
    for item in overrides:
        if "=" not in item:
            raise ContractError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = data
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ContractError(f"--set path {key!r} crosses a scalar")
        node[parts[-1]] = value
    return data
