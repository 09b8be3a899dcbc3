"""
Run configuration: named presets and schedules, JSON config files, and flag overrides.

A run config is resolved as

    preset defaults  <-  JSON config file (deep merge)  <-  dotted overrides

Presets and schedules carry the name of the recipe they come from so a
resolved config can be traced back to it.
"""

import copy
import json
import logging
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Union

from pydantic import ValidationError

from app.core.errors import ConfigurationError
from app.core.schemas import RunConfig, ScheduleConfig

logger = logging.getLogger(__name__)

REFERENCE_FRAMES = 1024
REFERENCE_TIME_MASK = 192

SCHEDULES: Dict[str, ScheduleConfig] = {
    "schedule.balanced_audioset": ScheduleConfig(name="schedule.balanced_audioset", kind="halve_every", after=10, every=5),
    "schedule.full_audioset": ScheduleConfig(name="schedule.full_audioset", kind="halve_every", after=2, every=1),
    "schedule.esc": ScheduleConfig(name="schedule.esc", kind="geometric", after=5, factor=0.85),
    "schedule.speechcommands": ScheduleConfig(name="schedule.speechcommands", kind="geometric", after=5, factor=0.85),
    "schedule.constant": ScheduleConfig(name="schedule.constant", kind="constant"),
}


def scaled_time_mask(target_frames: int) -> int:
    """Time-mask maximum scaled from 192 frames at 1024 frames."""
    return REFERENCE_TIME_MASK * target_frames // REFERENCE_FRAMES


def _preset(frames: int, classes: int, multi_label: bool, schedule: str, **train: Any) -> Dict[str, Any]:
    train.setdefault("time_mask_max", scaled_time_mask(frames))
    train.setdefault("freq_mask_max", 48)
    return {
        "model": {"target_frames": frames, "num_classes": classes, "multi_label": multi_label},
        "train": {"schedule": SCHEDULES[schedule].model_dump(), **train},
    }


PRESETS: Dict[str, Dict[str, Any]] = {
    "audioset-like": _preset(
        1024, 527, True, "schedule.balanced_audioset",
        batch_size=12, epochs=25, initial_lr=5e-5, mixup_ratio=0.5, loss="bce", average_last=20,
    ),
    "audioset-full": _preset(
        1024, 527, True, "schedule.full_audioset",
        batch_size=12, epochs=5, initial_lr=1e-5, mixup_ratio=0.5, loss="bce", balanced_sampling=True,
    ),
    "esc-like": _preset(
        512, 50, False, "schedule.esc",
        batch_size=48, epochs=20, initial_lr=1e-4, mixup_ratio=0.0, loss="ce",
    ),
    "speechcommands-like": _preset(
        128, 35, False, "schedule.speechcommands",
        batch_size=128, epochs=20, initial_lr=2.5e-4, mixup_ratio=0.5, loss="ce", noise=True,
    ),
}


def deep_merge(base: Dict[str, Any], update: Mapping[str, Any]) -> Dict[str, Any]:
    out = copy.deepcopy(base)
    for key, value in update.items():
        if isinstance(value, Mapping) and isinstance(out.get(key), dict):
            out[key] = deep_merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def expand_dotted(overrides: Mapping[str, Any]) -> Dict[str, Any]:
    """{"train.epochs": 3} -> {"train": {"epochs": 3}}; None values are dropped."""
    nested: Dict[str, Any] = {}
    for dotted, value in overrides.items():
        if value is None:
            continue
        node = nested
        *parents, leaf = dotted.split(".")
        for p in parents:
            node = node.setdefault(p, {})
        node[leaf] = value
    return nested


def _resolve_schedule(raw: Dict[str, Any]) -> None:
    schedule = raw.get("train", {}).get("schedule")
    if isinstance(schedule, str):
        if schedule not in SCHEDULES:
            raise ConfigurationError(f"unknown schedule {schedule!r}; known: {sorted(SCHEDULES)}")
        raw["train"]["schedule"] = SCHEDULES[schedule].model_dump()


def preset_config(name: str) -> RunConfig:
    return build_run_config({"preset": name})


def build_run_config(raw: Mapping[str, Any]) -> RunConfig:
    """Apply the named preset underneath `raw` and validate."""
    preset = raw.get("preset", "audioset-like")
    if preset not in PRESETS:
        raise ConfigurationError(f"unknown preset {preset!r}; known: {sorted(PRESETS)}")
    merged = deep_merge(PRESETS[preset], raw)
    merged["preset"] = preset
    frames = raw.get("model", {}).get("target_frames")
    if frames is not None and "time_mask_max" not in raw.get("train", {}):
        merged["train"]["time_mask_max"] = scaled_time_mask(int(frames))
    _resolve_schedule(merged)
    try:
        return RunConfig.model_validate(merged)
    except ValidationError as e:
        first = e.errors()[0]
        where = ".".join(str(p) for p in first["loc"]) or "config"
        raise ConfigurationError(f"invalid configuration at {where}: {first['msg']}") from e


def load_run_config(
    path: Optional[Union[str, Path]] = None,
    preset: Optional[str] = None,
    overrides: Optional[Mapping[str, Any]] = None,
) -> RunConfig:
    raw: Dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigurationError(f"{path}: config file not found")
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise ConfigurationError(f"{path}: not valid JSON ({e})") from e
        if not isinstance(raw, dict):
            raise ConfigurationError(f"{path}: config must be a JSON object")
    if preset is not None:
        raw["preset"] = preset
    raw = deep_merge(raw, expand_dotted(overrides or {}))
    config = build_run_config(raw)
    logger.debug(f"resolved run config: preset={config.preset} schedule={config.train.schedule.name}")
    return config
