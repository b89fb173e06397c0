"""Run configuration: nested dataclasses, two presets and a YAML round-trip.

A config file is YAML holding ``schema_version``, an optional ``preset``
name (``toy`` or ``full``) and any subset of the sections below; given
keys override the preset.  Unknown keys are errors.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, get_type_hints

import yaml

from .backbones import ConfigError

SCHEMA_VERSION = 1


@dataclass
class GridConfig:
    x_range: tuple[float, float] = (0.0, 70.4)
    y_range: tuple[float, float] = (-40.0, 40.0)
    z_range: tuple[float, float] = (-1.0, 3.0)
    bev_cell: float = 0.4
    phi_range: tuple[float, float] = (-math.pi / 2, math.pi / 2)
    rv_phi_cell: float = math.pi / 256
    rv_z_cell: float = 0.25


@dataclass
class NetConfig:
    channels: tuple[int, ...] = (8, 16, 32)
    layers: tuple[int, ...] = (1, 1, 1)
    upsample_channels: int = 8


@dataclass
class ModelConfig:
    point_width: int = 16
    common_width: int = 16
    raw_width: int = 16
    apf_hidden: int = 24
    apw_hidden: int = 32
    fusion: str = "apf"  # apf | es | sc
    apw_cls: bool = True
    apw_ctr: bool = True
    apw_weight: bool = True
    apw_after_enrichment: bool = True
    norm: str = "batch"
    norm_momentum: float = 0.99  # weight of the old running statistic
    image_size: tuple[int, int] = (384, 128)  # width, height
    bev_net: NetConfig = field(default_factory=NetConfig)
    rv_net: NetConfig = field(default_factory=NetConfig)
    cv_net: NetConfig = field(default_factory=lambda: NetConfig((8, 16, 32, 32), (1, 1, 1, 1), 8))
    fusion_net: NetConfig = field(default_factory=lambda: NetConfig((16, 32, 64), (1, 1, 1), 16))


@dataclass
class HeadConfig:
    anchor_size: tuple[float, float, float] = (1.6, 3.9, 1.56)  # w, l, h
    anchor_bottom_z: float = -1.78
    anchor_yaws: tuple[float, ...] = (0.0, math.pi / 2)
    pos_iou: float = 0.6
    neg_iou: float = 0.45
    score_threshold: float = 0.05
    nms_iou: float = 0.5
    max_detections: int = 100


@dataclass
class LossConfig:
    loc: float = 2.0
    cls: float = 1.0
    dir: float = 0.2
    fore: float = 1.0
    ctr: float = 1.0
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0


@dataclass
class TrainConfig:
    steps: int = 500
    batch_size: int = 2
    max_lr: float = 3e-3
    div_factor: float = 10.0
    final_div_factor: float = 1e4
    pct_start: float = 0.4
    momentum_range: tuple[float, float] = (0.85, 0.95)
    weight_decay: float = 0.01
    seed: int = 0
    augment: bool = False
    flip_prob: float = 0.5
    rotation_range: tuple[float, float] = (-math.pi / 4, math.pi / 4)
    scale_range: tuple[float, float] = (0.95, 1.05)
    log_every: int = 10
    checkpoint_every: int = 100


@dataclass
class DataConfig:
    root: str = "data/synthetic"
    split: str = "training"
    index: str = "index.txt"
    synth_frames: int = 10
    synth_seed: int = 0
    synth_cars: int = 4


@dataclass
class RunConfig:
    schema_version: int = SCHEMA_VERSION
    preset: str = "toy"
    grid: GridConfig = field(default_factory=GridConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    head: HeadConfig = field(default_factory=HeadConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)


def toy_preset() -> RunConfig:
    return RunConfig()


def full_preset() -> RunConfig:
    """Full-resolution grids and the wider networks."""
    wide = NetConfig((64, 128, 256), (4, 6, 6), 128)
    return RunConfig(
        preset="full",
        grid=GridConfig(bev_cell=0.2, rv_phi_cell=0.002454, rv_z_cell=0.05),
        model=ModelConfig(
            point_width=64, common_width=64, raw_width=64, apf_hidden=96, apw_hidden=64,
            image_size=(1248, 384),
            bev_net=wide, rv_net=wide,
            cv_net=NetConfig((24, 56, 152, 368), (1, 1, 4, 7), 128),
            fusion_net=wide,
        ),
        train=TrainConfig(steps=40 * 3712 // 2, augment=True),
    )


PRESETS = {"toy": toy_preset, "full": full_preset}


# -- dict conversion ------------------------------------------------------------------------
def to_dict(cfg) -> dict[str, Any]:
    out = {}
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        if dataclasses.is_dataclass(v):
            out[f.name] = to_dict(v)
        elif isinstance(v, tuple):
            out[f.name] = list(v)
        else:
            out[f.name] = v
    return out


def _coerce(value, hint, path: str):
    origin = getattr(hint, "__origin__", None)
    if dataclasses.is_dataclass(hint):
        if not isinstance(value, dict):
            raise ConfigError(f"{path}: expected a mapping")
        return _merge(hint(), value, path)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected a list")
        args = hint.__args__
        item = args[0]
        if len(args) != 2 or args[1] is not Ellipsis:
            if len(value) != len(args):
                raise ConfigError(f"{path}: expected {len(args)} values, got {len(value)}")
        return tuple(_coerce(v, item, f"{path}[{i}]") for i, v in enumerate(value))
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number")
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string")
        return value
    return value


def _merge(base, overrides: dict, path: str = ""):
    hints = get_type_hints(type(base))
    names = {f.name for f in dataclasses.fields(base)}
    changes = {}
    for key, value in overrides.items():
        where = f"{path}.{key}" if path else key
        if key not in names:
            raise ConfigError(f"unknown config key {where}")
        current = getattr(base, key)
        if dataclasses.is_dataclass(current):
            if not isinstance(value, dict):
                raise ConfigError(f"{where}: expected a mapping")
            changes[key] = _merge(current, value, where)
        else:
            changes[key] = _coerce(value, hints[key], where)
    return dataclasses.replace(base, **changes)


def from_dict(data: dict[str, Any]) -> RunConfig:
    data = dict(data or {})
    version = data.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigError(f"schema_version {version} is not supported (expected {SCHEMA_VERSION})")
    preset = data.get("preset", "toy")
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    cfg = _merge(PRESETS[preset](), data)
    validate(cfg)
    return cfg


def apply_overrides(cfg: RunConfig, changes: dict[str, Any]) -> RunConfig:
    """``cfg`` with a nested dict of changes applied and re-validated."""
    out = _merge(cfg, changes)
    validate(out)
    return out


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return toy_preset()
    try:
        data = yaml.safe_load(Path(path).read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML ({exc})") from exc
    if data is not None and not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return from_dict(data or {})


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(to_dict(cfg), sort_keys=False)


def save_config(cfg: RunConfig, path: str | Path) -> None:
    Path(path).write_text(dump_config(cfg))


def diff_configs(a: dict, b: dict, prefix: str = "") -> list[str]:
    """Dotted names of fields whose values differ between two config dicts."""
    out = []
    for key in sorted(set(a) | set(b)):
        where = f"{prefix}{key}"
        va, vb = a.get(key), b.get(key)
        if isinstance(va, dict) and isinstance(vb, dict):
            out.extend(diff_configs(va, vb, where + "."))
        elif va != vb:
            out.append(where)
    return out


# -- validation -------------------------------------------------------------------------------
def validate(cfg: RunConfig) -> None:
    g, m, h, t = cfg.grid, cfg.model, cfg.head, cfg.train
    for name in ("x_range", "y_range", "z_range", "phi_range"):
        lo, hi = getattr(g, name)
        if hi <= lo:
            raise ConfigError(f"grid.{name} must be increasing")
    if min(g.bev_cell, g.rv_phi_cell, g.rv_z_cell) <= 0:
        raise ConfigError("grid cell sizes must be positive")
    if m.fusion not in ("apf", "es", "sc"):
        raise ConfigError(f"model.fusion must be apf, es or sc, got {m.fusion!r}")
    if m.norm not in ("batch", "affine", "none"):
        raise ConfigError(f"model.norm must be batch, affine or none, got {m.norm!r}")
    if not 0.0 <= m.norm_momentum < 1.0:
        raise ConfigError("model.norm_momentum must lie in [0, 1)")
    if m.apw_weight and not m.apw_cls:
        raise ConfigError("model.apw_weight needs model.apw_cls (weights are foreground scores)")
    for name in ("point_width", "common_width", "raw_width", "apf_hidden", "apw_hidden"):
        if getattr(m, name) < 1:
            raise ConfigError(f"model.{name} must be positive")
    for name in ("bev_net", "rv_net", "cv_net", "fusion_net"):
        net = getattr(m, name)
        if len(net.channels) != len(net.layers) or not net.channels:
            raise ConfigError(f"model.{name}: channels and layers must have equal, nonzero length")
    if len(m.cv_net.channels) < 2:
        raise ConfigError("model.cv_net needs at least two blocks")
    if not 0 <= h.neg_iou <= h.pos_iou <= 1:
        raise ConfigError("head: need 0 <= neg_iou <= pos_iou <= 1")
    if min(h.anchor_size) <= 0:
        raise ConfigError("head.anchor_size must be positive")
    if t.steps < 1 or t.batch_size < 1:
        raise ConfigError("train.steps and train.batch_size must be positive")
    if not 0 < t.pct_start < 1:
        raise ConfigError("train.pct_start must lie in (0, 1)")
    for name in ("loc", "cls", "dir", "fore", "ctr"):
        if getattr(cfg.loss, name) < 0:
            raise ConfigError(f"loss.{name} must be >= 0")
