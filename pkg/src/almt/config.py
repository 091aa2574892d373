"""Run configuration: presets per dataset profile, strict key checking, dotted overrides."""

from __future__ import annotations

import copy
import json
from pathlib import Path
from typing import Any, Iterable, Mapping

from .metrics import BucketSpec
from .model import MODALITIES, ConfigError, ModelConfig
from .train import TrainConfig

# Only fusion depth and input shapes differ between the profiles; dims that
# are not published stay None and must be supplied by the user.
PRESETS: dict[str, dict] = {
    "mosi": {
        "model": {
            "fusion_depth": 2,
            "input_dims": {"language": 768, "visual": 20, "audio": 5},
            "input_lens": {"language": 50, "visual": 50, "audio": 50},
        },
        "metrics": {"profile": "mosi"},
    },
    "mosei": {
        "model": {
            "fusion_depth": 4,
            "input_dims": {m: None for m in MODALITIES},
            "input_lens": {m: None for m in MODALITIES},
        },
        "metrics": {"profile": "mosei"},
    },
    "sims": {
        "model": {
            "fusion_depth": 4,
            "input_dims": {m: None for m in MODALITIES},
            "input_lens": {m: None for m in MODALITIES},
        },
        "metrics": {"profile": "sims"},
    },
}


def default_run_config(preset: str = "mosi") -> dict:
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    base = {
        "preset": preset,
        "seed": 0,
        "model": ModelConfig().to_dict(),
        "train": {
            "epochs": 200,
            "batch_size": 64,
            "weight_decay": 0.01,
            "beta1": 0.9,
            "beta2": 0.999,
            "eps": 1e-8,
            "clip_norm": None,
        },
        "schedule": {"base_lr": 1e-4, "warmup_frac": 0.05, "warmup_steps": None, "floor_lr": 0.0},
        "metrics": {"profile": "mosi", "buckets": None},
        "data": {"train": None, "valid": None, "test": None},
    }
    return merge(base, PRESETS[preset])


# keys whose values are free-form mappings rather than fixed sections
_OPEN_KEYS = {"metrics.buckets"}


def merge(base: dict, update: Mapping, path: str = "") -> dict:
    """Recursively overlay ``update`` on ``base``, rejecting keys ``base`` lacks."""
    out = copy.deepcopy(base)
    for key, value in update.items():
        full = f"{path}{key}"
        if key not in out:
            raise ConfigError(f"unknown config key {full!r}")
        if isinstance(out[key], dict) and full not in _OPEN_KEYS:
            if not isinstance(value, Mapping):
                raise ConfigError(f"{full!r} must be an object")
            out[key] = merge(out[key], value, full + ".")
        else:
            out[key] = copy.deepcopy(value)
    return out


def load_run_config(path=None, preset: str | None = None) -> dict:
    user = {}
    if path is not None:
        try:
            user = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        if not isinstance(user, dict):
            raise ConfigError(f"{path}: top level must be an object")
    chosen = preset or user.get("preset", "mosi")
    return merge(default_run_config(chosen), {k: v for k, v in user.items() if k != "preset"})


def _parse_value(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(cfg: dict, overrides: Iterable[str]) -> tuple[dict, list[str]]:
    """Apply ``a.b.c=value`` assignments; values parse as JSON, else stay strings."""
    cfg = copy.deepcopy(cfg)
    echoed = []
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        parts = key.strip().split(".")
        node = cfg
        for i, part in enumerate(parts[:-1]):
            if not isinstance(node, dict) or part not in node or not isinstance(node[part], dict):
                raise ConfigError(f"unknown config key {'.'.join(parts[:i + 1])!r}")
            node = node[part]
        if parts[-1] not in node:
            raise ConfigError(f"unknown config key {key!r}")
        node[parts[-1]] = _parse_value(raw)
        echoed.append(f"{key}={json.dumps(node[parts[-1]])}")
    return cfg, echoed


def model_config(cfg: dict) -> ModelConfig:
    model = cfg["model"]
    for table in ("input_dims", "input_lens"):
        missing = [m for m in MODALITIES if model[table].get(m) is None]
        if missing:
            raise ConfigError(
                f"model.{table} must be given for {missing} (preset {cfg.get('preset')!r} has no published value)"
            )
    try:
        return ModelConfig.from_dict(model).validate()
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def bucket_specs(cfg: dict):
    explicit = cfg["metrics"].get("buckets")
    if explicit:
        try:
            return {name: BucketSpec(**spec) for name, spec in explicit.items()}
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"metrics.buckets: {exc}") from exc
    return cfg["metrics"]["profile"]


def train_config(cfg: dict, out_dir: Path | None = None) -> TrainConfig:
    data = cfg["data"]
    if not data.get("train"):
        raise ConfigError("data.train is required")
    for split in ("train", "valid", "test"):
        if data.get(split) and not Path(data[split]).exists():
            raise ConfigError(f"data.{split}: {data[split]} does not exist")
    t, s = cfg["train"], cfg["schedule"]
    return TrainConfig(
        model=model_config(cfg),
        train_data=data["train"],
        valid_data=data.get("valid"),
        test_data=data.get("test"),
        epochs=t["epochs"],
        batch_size=t["batch_size"],
        seed=cfg["seed"],
        base_lr=s["base_lr"],
        warmup_frac=s["warmup_frac"],
        warmup_steps=s["warmup_steps"],
        floor_lr=s["floor_lr"],
        weight_decay=t["weight_decay"],
        beta1=t["beta1"],
        beta2=t["beta2"],
        eps=t["eps"],
        clip_norm=t["clip_norm"],
        checkpoint_path=None if out_dir is None else out_dir / "checkpoint.almt",
        metrics_log_path=None if out_dir is None else out_dir / "epochs.jsonl",
        buckets=bucket_specs(cfg),
    )


def dumps(cfg: dict) -> str:
    return json.dumps(cfg, indent=2, sort_keys=True)
