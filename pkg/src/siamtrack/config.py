"""Flat key-value configuration files with strict section schemas.

Format: one ``section.key = value`` per line, ``#`` comments, blank lines
ignored. The only sectionless key is ``seed``. Unknown sections or keys are
errors, not warnings; silent misconfiguration is the main operational
hazard here. List values are comma-separated.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError
from .geometry import AnchorConfig
from .backbone import BackboneConfig
from .model import ModelConfig
from .sampling import SynthSpec
from .tracker import TrackerConfig
from .training import TrainConfig


def _parse_bool(s: str) -> bool:
    if s.lower() in ("true", "1", "yes"):
        return True
    if s.lower() in ("false", "0", "no"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _parse_int_list(s: str) -> tuple[int, ...]:
    return tuple(int(v.strip()) for v in s.split(",") if v.strip())


def _parse_float_list(s: str) -> tuple[float, ...]:
    return tuple(float(v.strip()) for v in s.split(",") if v.strip())


SCHEMA: dict[str, dict[str, object]] = {
    "": {"seed": int},
    "synth": {
        "canvas": int, "object_min": float, "object_max": float,
        "aspect_min": float, "aspect_max": float, "walk_sigma": float,
        "velocity_x": float, "velocity_y": float, "distractors": int,
        "noise": float, "texture_cells": int, "sequences": int, "frames": int,
    },
    "model": {
        "variant": str, "levels": _parse_int_list, "stem_channels": int,
        "stage_channels": _parse_int_list, "dilations": _parse_int_list,
        "adapter_dim": int, "total_stride": int, "in_channels": int,
        "template_crop": int, "head": str,
    },
    "anchor": {"ratios": _parse_float_list, "scale": float, "stride": int},
    "train": {
        "epochs": int, "warmup_epochs": int, "warmup_lr": float, "peak_lr": float,
        "final_lr": float, "momentum": float, "weight_decay": float,
        "backbone_lr_scale": float, "batch_size": int, "steps_per_epoch": int,
        "freeze_backbone_epochs": int, "reg_weight": float, "shift_range": float,
        "scale_jitter": float, "grad_clip": float,
    },
    "tracker": {
        "template_size": int, "search_size": int, "context_fraction": float,
        "window_influence": float, "penalty_k": float, "size_lr": float,
    },
    "eval": {"dataset": str, "precision_threshold": float},
    "bias": {
        "shifts": _parse_float_list, "seeds": int, "epochs": int,
        "steps_per_epoch": int, "batch_size": int, "eval_samples": int,
        "variant": str, "track_eval_sequences": int, "track_eval_frames": int,
    },
    "bench": {
        "channels": _parse_int_list, "k": int, "template": int,
        "search": int, "repeats": int,
    },
}


@dataclass
class Config:
    """Parsed configuration: raw typed values plus the original text (for hashing)."""

    values: dict[str, object] = field(default_factory=dict)
    text: str = ""
    path: Path | None = None

    def get(self, key: str, default=None):
        return self.values.get(key, default)

    def section(self, name: str) -> dict[str, object]:
        prefix = name + "."
        return {k[len(prefix):]: v for k, v in self.values.items() if k.startswith(prefix)}


def parse_config(text: str, path=None) -> Config:
    values: dict[str, object] = {}
    for ln, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {ln}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if "." in key:
            section, field_name = key.split(".", 1)
        else:
            section, field_name = "", key
        if section not in SCHEMA:
            raise ConfigError(f"line {ln}: unknown section {section!r}")
        if field_name not in SCHEMA[section]:
            raise ConfigError(f"line {ln}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {ln}: duplicate key {key!r}")
        parser = SCHEMA[section][field_name]
        try:
            values[key] = parser(value)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"line {ln}: bad value for {key!r}: {exc}") from exc
    return Config(values=values, text=text, path=Path(path) if path else None)


def load_config(path) -> Config:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    return parse_config(path.read_text(), path=path)


# --- builders: sections into the typed config objects (defaults fill gaps) ---


def synth_spec(cfg: Config) -> SynthSpec:
    s = cfg.section("synth")
    kwargs = {}
    for key in ("canvas", "object_min", "object_max", "aspect_min", "aspect_max",
                "walk_sigma", "distractors", "noise", "texture_cells"):
        if key in s:
            kwargs[key] = s[key]
    if "velocity_x" in s or "velocity_y" in s:
        kwargs["velocity"] = (s.get("velocity_x", 0.0), s.get("velocity_y", 0.0))
    return SynthSpec(**kwargs)


def model_config(cfg: Config) -> ModelConfig:
    m = cfg.section("model")
    a = cfg.section("anchor")
    bb_kwargs = {}
    for src, dst in (("variant", "variant"), ("stem_channels", "stem_channels"),
                     ("stage_channels", "stage_channels"), ("dilations", "dilations"),
                     ("adapter_dim", "adapter_dim"), ("total_stride", "total_stride"),
                     ("in_channels", "in_channels")):
        if src in m:
            bb_kwargs[dst] = m[src]
    backbone = BackboneConfig(**{**_desk_backbone_defaults(bb_kwargs.get("variant", "padded_residual")), **bb_kwargs})
    anchor_kwargs = {k: a[k] for k in ("ratios", "scale", "stride") if k in a}
    anchor_kwargs.setdefault("stride", backbone.total_stride)
    anchor = AnchorConfig(**anchor_kwargs)
    mk = {}
    if "levels" in m:
        mk["levels"] = m["levels"]
    if "template_crop" in m:
        mk["template_crop"] = m["template_crop"]
    if "head" in m:
        mk["head_variant"] = m["head"]
    return ModelConfig(backbone=backbone, anchor=anchor, **mk)


def _desk_backbone_defaults(variant: str) -> dict:
    base = BackboneConfig.desk(variant if variant in ("padfree_shallow", "padded_residual") else "padded_residual")
    return {
        "variant": base.variant, "stem_channels": base.stem_channels,
        "stage_channels": base.stage_channels, "dilations": base.dilations,
        "adapter_dim": base.adapter_dim, "total_stride": base.total_stride,
        "in_channels": base.in_channels,
    }


def train_config(cfg: Config, seed_override: int | None = None) -> TrainConfig:
    t = cfg.section("train")
    kwargs = {k: v for k, v in t.items() if k in TrainConfig.__dataclass_fields__}
    seed = seed_override if seed_override is not None else cfg.get("seed")
    if seed is not None:
        kwargs["seed"] = int(seed)
    return TrainConfig(**kwargs)


def tracker_config(cfg: Config) -> TrackerConfig:
    return TrackerConfig(**cfg.section("tracker"))
