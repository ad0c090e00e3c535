"""Run configuration: one JSON file plus ``section.key=value`` overrides.

Every stochastic component derives its seed from the global ``seed`` plus a
fixed offset (see ``SEED_OFFSETS``), so changing one number reruns everything
consistently.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Any

from .dbn import TrainConfig
from .evaluation import SsimParams
from .iic import HeadConfig, TreeConfig
from .synthetic import SceneSpec

SEED_OFFSETS = {
    "scenes": 0,
    "encoder": 1000,
    "tree": 2000,
    "labels": 3000,
    "sequence": 4000,
}


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    spec: dict = field(default_factory=dict)  # SceneSpec overrides; its seed is derived
    n_scenes: int = 1
    sequence_steps: int = 5
    advection: tuple[float, float] = (1.0, 0.0)
    scene_paths: list[str] = field(default_factory=list)  # external rasters replace generated scenes


@dataclass
class SamplingConfig:
    radius: int = 0
    bands: list[int] | None = None


@dataclass
class EncoderConfig:
    layer_dims: list[int] = field(default_factory=lambda: [64, 32])
    train: dict = field(default_factory=lambda: {"learning_rate": 0.05, "momentum": 0.9, "epochs": 30})


@dataclass
class TreeSection:
    k: int = 4
    max_depth: int = 2
    min_node_samples: int = 100
    head: dict = field(default_factory=lambda: {"lr": 0.01, "n_subheads": 3})


@dataclass
class ContextConfig:
    purity_threshold: float = 0.5
    min_support: int = 2
    label_paths: list[str] = field(default_factory=list)
    auto_erode: int = 2
    auto_boxes: int = 24
    auto_box_size: int = 7


@dataclass
class EvaluationConfig:
    ssim: dict = field(default_factory=dict)
    reference_paths: dict = field(default_factory=dict)  # "<scene>:<target>" -> raster path


@dataclass
class FusionConfig:
    target: str = "smoke"
    target_scene: str = ""  # defaults to the first scene
    streams: list[dict] = field(default_factory=list)  # {"scene", "weight"}; empty = every scene
    threshold: float = 0.5
    time_window: float = 3600.0
    cf_threshold: float = 0.2


@dataclass
class TrackingConfig:
    target: str = "smoke"
    source: str = "predicted"  # or "truth"
    connectivity: int = 8
    iou_min: float = 0.2
    min_area: int = 1


@dataclass
class PipelineConfig:
    run_id: str = "run"
    output: str = "out"
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    sampling: SamplingConfig = field(default_factory=SamplingConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    tree: TreeSection = field(default_factory=TreeSection)
    context: ContextConfig = field(default_factory=ContextConfig)
    evaluation: EvaluationConfig = field(default_factory=EvaluationConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    tracking: TrackingConfig = field(default_factory=TrackingConfig)

    def component_seed(self, name: str) -> int:
        return self.seed + SEED_OFFSETS[name]

    def scene_spec(self, index: int = 0) -> SceneSpec:
        return SceneSpec.from_dict({**self.data.spec, "seed": self.component_seed("scenes") + index})

    def train_config(self) -> TrainConfig:
        return TrainConfig(**{**self.encoder.train, "seed": self.component_seed("encoder")})

    def tree_config(self) -> TreeConfig:
        head = HeadConfig(**{**self.tree.head, "seed": self.component_seed("tree")})
        return TreeConfig(self.tree.k, self.tree.max_depth, self.tree.min_node_samples, head)

    def ssim_params(self) -> SsimParams:
        return SsimParams(**self.evaluation.ssim)

    @property
    def run_dir(self) -> Path:
        return Path(self.output) / self.run_id

    def to_dict(self, include_output: bool = True) -> dict:
        d = asdict(self)
        if not include_output:
            d.pop("output")
        return d

    def digest(self) -> str:
        """Hash of the run-defining settings; the output location is excluded."""
        text = json.dumps(self.to_dict(include_output=False), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()

    def validate(self) -> "PipelineConfig":
        """Build every derived object once so bad values fail before any work starts."""
        try:
            self.scene_spec()
            self.train_config()
            self.tree_config()
            self.ssim_params()
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid configuration: {exc}") from exc
        if not self.encoder.layer_dims or not 1 <= len(self.encoder.layer_dims) <= 2:
            raise ConfigError("encoder.layer_dims must list 1 or 2 hidden sizes")
        if self.data.n_scenes < 1 and not self.data.scene_paths:
            raise ConfigError("data.n_scenes must be >= 1")
        if self.sampling.radius < 0:
            raise ConfigError("sampling.radius must be >= 0")
        if self.tracking.connectivity not in (4, 8):
            raise ConfigError("tracking.connectivity must be 4 or 8")
        if self.tracking.source not in ("predicted", "truth"):
            raise ConfigError("tracking.source must be 'predicted' or 'truth'")
        if not 0.0 <= self.fusion.threshold <= 1.0:
            raise ConfigError("fusion.threshold must lie in [0, 1]")
        for p in [*self.data.scene_paths, *self.context.label_paths, *self.evaluation.reference_paths.values()]:
            if not (Path(p).exists() or Path(p).with_suffix(".json").exists()):
                raise ConfigError(f"configured path does not exist: {p}")
        return self


def _build(cls, obj: dict, where: str):
    if not isinstance(obj, dict):
        raise ConfigError(f"{where or 'config'} must be a JSON object")
    known = {f.name: f for f in fields(cls)}
    unknown = set(obj) - set(known)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where or 'config'}: {', '.join(sorted(unknown))}")
    kwargs = {}
    for name, value in obj.items():
        default = getattr(cls(), name)
        if is_dataclass(default):
            value = _build(type(default), value, f"{where}.{name}".lstrip("."))
        elif isinstance(default, tuple):
            value = tuple(value)
        elif isinstance(default, dict) and isinstance(value, dict):
            value = {**default, **value}  # partial sections keep the remaining defaults
        kwargs[name] = value
    return cls(**kwargs)


def parse_override(text: str) -> tuple[list[str], Any]:
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form section.key=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw  # bare strings need no quotes
    return key.strip().split("."), value


def apply_overrides(obj: dict, overrides: list[str]) -> dict:
    obj = json.loads(json.dumps(obj))
    for text in overrides:
        keys, value = parse_override(text)
        node = obj
        for k in keys[:-1]:
            node = node.setdefault(k, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {text!r} descends into a non-object")
        node[keys[-1]] = value
    return obj


def load_config(path=None, overrides: list[str] = (), output: str | None = None) -> PipelineConfig:
    obj = {}
    if path is not None:
        try:
            obj = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
    obj = apply_overrides(obj, list(overrides))
    if output is not None:
        obj["output"] = output
    return _build(PipelineConfig, obj, "").validate()
