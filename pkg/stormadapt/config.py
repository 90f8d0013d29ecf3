"""Experiment configuration: JSON sections, flag overrides and run snapshots.

A config file is a JSON object with the sections ``data``, ``model``,
``train``, ``advgrl``, ``metricreg`` and ``dmp``. Missing keys take the
defaults below; unknown keys are rejected. Overrides use dotted keys
(``train.gamma=0.01``) and always win over the file.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable

from .errors import ConfigError, InputError
from .revgrad import AdvGrlConfig
from .toyscenes import DEFAULT_CLASS_NAMES, SceneSpec
from .weathergen import MaskSpec, Weather

OUT_ENV_VAR = "STORMADAPT_OUT"
DEFAULT_OUT_ROOT = "runs"
SNAPSHOT_NAME = "config.json"


# ---------------------------------------------------------------------------
# Sections
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DataConfig:
    root: str = "data"
    train_split: str = "train"
    val_split: str = "val-large"
    n_train: int = 500
    n_val: int = 100
    target_weather: str = Weather.FOG.value
    width: int = 96
    height: int = 96
    class_names: tuple[str, ...] = DEFAULT_CLASS_NAMES
    object_count: tuple[int, int] = (1, 6)
    object_size: tuple[int, int] = (12, 32)

    def __post_init__(self) -> None:
        if self.target_weather not in {w.value for w in Weather}:
            raise InputError(f"data.target_weather must be fog or rain, got {self.target_weather!r}")
        if self.n_train < 0 or self.n_val < 0:
            raise InputError("data.n_train and data.n_val must be >= 0")
        self.scene_spec()

    def scene_spec(self) -> SceneSpec:
        return SceneSpec(
            width=self.width,
            height=self.height,
            class_names=tuple(self.class_names),
            object_count=tuple(self.object_count),
            object_size=tuple(self.object_size),
        )


@dataclass(frozen=True)
class ModelConfig:
    num_classes: int = 3
    backbone_channels: tuple[int, int, int, int] = (32, 64, 128, 128)
    anchor_sizes: tuple[float, ...] = (16.0, 32.0, 48.0)
    rpn_pre_nms_top_n: int = 300
    rpn_post_nms_top_n: int = 64
    rpn_test_post_nms_top_n: int = 100
    rpn_nms_iou: float = 0.7
    rpn_batch_size: int = 128
    rpn_positive_fraction: float = 0.5
    roi_output_size: int = 7
    roi_pool_mode: str = "max"
    roi_hidden: int = 256
    roi_batch_size: int = 64
    roi_positive_fraction: float = 0.25
    img_head_hidden: int = 256
    obj_head_hidden: int = 128
    da_proposals: int = 16
    score_threshold: float = 0.05
    detection_nms_iou: float = 0.3
    max_detections: int = 50

    def __post_init__(self) -> None:
        if self.num_classes < 1:
            raise InputError("model.num_classes must be >= 1")
        if len(self.backbone_channels) != 4:
            raise InputError("model.backbone_channels needs four entries")
        if self.roi_pool_mode not in ("max", "align"):
            raise InputError(f"model.roi_pool_mode must be max or align, got {self.roi_pool_mode}")
        if self.rpn_post_nms_top_n < 0 or self.da_proposals < 0:
            raise InputError("proposal counts must be >= 0")


@dataclass(frozen=True)
class TrainConfig:
    preset: str = "full"
    mode: str = "aligned"  # or "cross-camera"
    iters_stage1: int = 2000
    iters_stage2: int = 800
    lr: float = 0.01
    lr_stage2: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 0.0005
    gamma: float = 0.1
    seed: int = 0
    clip_grad_norm: float = 10.0
    checkpoint_every: int = 500
    log_every: int = 50
    workers: int = 0

    def __post_init__(self) -> None:
        if self.iters_stage1 <= 0 or self.iters_stage2 <= 0:
            raise InputError("train.iters_stage1 and train.iters_stage2 must be > 0")
        if self.mode not in ("aligned", "cross-camera"):
            raise InputError(f"train.mode must be aligned or cross-camera, got {self.mode}")
        if resolve_preset(self.preset) not in PRESETS:
            raise InputError(f"unknown preset {self.preset!r}; choose from {sorted(PRESETS)}")
        if self.gamma < 0:
            raise InputError("train.gamma must be >= 0")

    @property
    def total_iterations(self) -> int:
        return self.iters_stage1 + self.iters_stage2


@dataclass(frozen=True)
class MetricRegConfig:
    delta: float = 1.0

    def __post_init__(self) -> None:
        if not self.delta > 0:
            raise InputError(f"metricreg.delta must be > 0, got {self.delta}")


@dataclass(frozen=True)
class DmpConfig:
    patch_pixels: int = 64

    def __post_init__(self) -> None:
        self.mask_spec()

    def mask_spec(self, seed: int = 0) -> MaskSpec:
        return MaskSpec(patch_pixels=self.patch_pixels, rng_seed=seed)


# ---------------------------------------------------------------------------
# Ablation presets
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AdaptationSwitches:
    img_da: bool = False
    obj_da: bool = False
    reversal: str = "advgrl"  # "grl" or "advgrl"
    img_reg: bool = False
    obj_reg: bool = False
    dmp: bool = False

    @property
    def any_domain_terms(self) -> bool:
        return self.img_da or self.obj_da or self.img_reg or self.obj_reg


PRESETS: dict[str, AdaptationSwitches] = {
    "source-only": AdaptationSwitches(),
    "dmp-only": AdaptationSwitches(dmp=True),
    "img-grl": AdaptationSwitches(img_da=True, reversal="grl"),
    "obj-grl": AdaptationSwitches(obj_da=True, reversal="grl"),
    "baseline": AdaptationSwitches(img_da=True, obj_da=True, reversal="grl"),
    "advgrl": AdaptationSwitches(img_da=True, obj_da=True),
    "reg-grl": AdaptationSwitches(
        img_da=True, obj_da=True, reversal="grl", img_reg=True, obj_reg=True
    ),
    "advgrl-reg": AdaptationSwitches(img_da=True, obj_da=True, img_reg=True, obj_reg=True),
    "full": AdaptationSwitches(img_da=True, obj_da=True, img_reg=True, obj_reg=True, dmp=True),
}
PRESET_ALIASES = {"baseline-grl": "baseline"}
ABLATION_ROWS = ("source-only", "baseline", "advgrl", "advgrl-reg", "full")


def resolve_preset(name: str) -> str:
    return PRESET_ALIASES.get(name, name)


# ---------------------------------------------------------------------------
# Experiment config
# ---------------------------------------------------------------------------

SECTIONS: dict[str, type] = {
    "data": DataConfig,
    "model": ModelConfig,
    "train": TrainConfig,
    "advgrl": AdvGrlConfig,
    "metricreg": MetricRegConfig,
    "dmp": DmpConfig,
}


@dataclass(frozen=True)
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    advgrl: AdvGrlConfig = field(default_factory=AdvGrlConfig)
    metricreg: MetricRegConfig = field(default_factory=MetricRegConfig)
    dmp: DmpConfig = field(default_factory=DmpConfig)

    def __post_init__(self) -> None:
        if self.model.num_classes != len(self.data.class_names):
            raise ConfigError(
                f"model.num_classes is {self.model.num_classes} but data.class_names "
                f"lists {len(self.data.class_names)} classes"
            )

    @property
    def switches(self) -> AdaptationSwitches:
        return PRESETS[resolve_preset(self.train.preset)]

    @property
    def reversal_config(self) -> AdvGrlConfig:
        """The reversal schedule the active preset asks for."""
        if self.switches.reversal == "grl":
            return AdvGrlConfig.constant(self.advgrl.lambda0)
        return self.advgrl

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, raw: dict[str, Any]) -> ExperimentConfig:
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        unknown = set(raw) - set(SECTIONS)
        if unknown:
            raise ConfigError(f"unknown config section(s): {', '.join(sorted(unknown))}")
        return cls(**{name: _build_section(name, raw.get(name, {})) for name in SECTIONS})


def _build_section(name: str, values: dict[str, Any]) -> Any:
    section_cls = SECTIONS[name]
    if not isinstance(values, dict):
        raise ConfigError(f"config section {name!r} must be an object")
    fields = {f.name: f for f in dataclasses.fields(section_cls)}
    unknown = set(values) - set(fields)
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(f'{name}.{k}' for k in sorted(unknown))}")
    kwargs = {}
    for key, value in values.items():
        default = fields[key].default
        # JSON has no tuples; restore them where the default is one.
        if isinstance(default, tuple) and isinstance(value, list):
            value = tuple(value)
        kwargs[key] = value
    try:
        return section_cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"bad values in section {name!r}: {exc}") from exc


def load_config(path: Path | str | None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    return ExperimentConfig.from_dict(raw)


def parse_override(text: str) -> tuple[str, str, Any]:
    key, sep, value = text.partition("=")
    section, dot, name = key.strip().partition(".")
    if not sep or not dot or not name:
        raise ConfigError(f"override must look like section.key=value, got {text!r}")
    try:
        parsed = json.loads(value)
    except json.JSONDecodeError:
        parsed = value
    return section, name, parsed


def apply_overrides(config: ExperimentConfig, overrides: Iterable[str]) -> ExperimentConfig:
    raw = config.to_dict()
    for text in overrides:
        section, name, value = parse_override(text)
        if section not in raw:
            raise ConfigError(f"unknown config section in override: {section!r}")
        raw[section][name] = value
    return ExperimentConfig.from_dict(raw)


# ---------------------------------------------------------------------------
# Runs
# ---------------------------------------------------------------------------


def output_root(flag: str | None = None) -> Path:
    if flag:
        return Path(flag)
    return Path(os.environ.get(OUT_ENV_VAR) or DEFAULT_OUT_ROOT)


@dataclass(frozen=True)
class RunConfig:
    experiment: ExperimentConfig
    seed: int
    out_dir: Path
    command: str = "train"

    def snapshot(self) -> dict[str, Any]:
        return {
            "command": self.command,
            "seed": self.seed,
            "preset": resolve_preset(self.experiment.train.preset),
            "config": self.experiment.to_dict(),
        }


def write_snapshot(run: RunConfig) -> Path:
    run.out_dir.mkdir(parents=True, exist_ok=True)
    path = run.out_dir / SNAPSHOT_NAME
    path.write_text(json.dumps(run.snapshot(), indent=2, sort_keys=True), encoding="utf-8")
    return path
