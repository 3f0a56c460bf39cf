"""Layered configuration: preset -> YAML file -> ``key.path=value`` overrides."""
from __future__ import annotations

import copy
from dataclasses import asdict
from pathlib import Path

import yaml

from phenofactor.losses import LossWeights
from phenofactor.networks import NetworkConfig
from phenofactor.training import TrainConfig

# Toy runs use a smaller network, lazy R1 and loss weights retuned for the
# small feature net and short schedule (see the decisions ledger). A preset
# may carry ``stage1``/``stage2`` sections that apply to that stage only.
TRAIN_PRESETS = {
    "paper": dict(
        network=asdict(NetworkConfig.preset("paper256")),
        batch_size=16,
    ),
    "toy": dict(
        network=asdict(NetworkConfig.preset("toy")),
        batch_size=8,
        r1_interval=4,
        lr_enc=2e-3,
        weights=asdict(LossWeights(lambda_perc_stage1=10.0, lambda_perc_stage2=10.0,
                                   lambda_DA=1.0, lambda_align=20.0)),
        freeze_ec_stage2=True,
        steps=1500,
        stage2=dict(lr_enc=1e-3, steps=2000),
    ),
    "micro": dict(
        network=asdict(NetworkConfig.preset("micro")),
        batch_size=2,
        steps=4,
        weights=asdict(LossWeights(lambda_perc_stage1=1.0, lambda_perc_stage2=1.0)),
    ),
}

DEFAULTS = {
    "seed": 0,
    "preset": "toy",
    "synth": {"n": 200, "res": 32, "val_every": 10},
    "embedders": {"epochs": 12, "batch_size": 32, "lr": 2e-3, "feature_epochs": 40},
    "train": {},
    "stage1": {},
    "stage2": {},
    "finetune": {"steps": 200, "lr_g": 5e-4, "lr_z": 5e-3},
    "edit": {"max_iters": 100, "tol": 1e-4, "mu": 0.01},
    "eval": {"n": 100},
}


def deep_merge(base: dict, update: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in update.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def parse_override(item: str) -> tuple[list[str], object]:
    if "=" not in item:
        raise ValueError(f"override {item!r} must look like key.path=value")
    key, raw = item.split("=", 1)
    return key.strip().split("."), yaml.safe_load(raw)


def apply_overrides(cfg: dict, overrides) -> dict:
    cfg = copy.deepcopy(cfg)
    for item in overrides or []:
        path, value = parse_override(item)
        node = cfg
        for part in path[:-1]:
            node = node.setdefault(part, {})
        node[path[-1]] = value
    return cfg


def load_config(path=None, overrides=None, seed: int | None = None) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        with open(Path(path)) as fh:
            cfg = deep_merge(cfg, yaml.safe_load(fh) or {})
    cfg = apply_overrides(cfg, overrides)
    if seed is not None:
        cfg["seed"] = seed
    return cfg


def preset_stage_dict(preset: str, stage: str | None = None) -> dict:
    """Preset options, with the preset's own ``stage1``/``stage2`` section applied."""
    if preset not in TRAIN_PRESETS:
        raise KeyError(f"unknown preset {preset!r}; choose from {sorted(TRAIN_PRESETS)}")
    base = {k: v for k, v in TRAIN_PRESETS[preset].items() if k not in ("stage1", "stage2")}
    if stage is not None:
        base = deep_merge(base, TRAIN_PRESETS[preset].get(f"stage{stage}", {}))
    return base


def preset_train_config(preset: str = "toy", stage: str | None = None, **overrides) -> TrainConfig:
    return TrainConfig.from_dict(deep_merge(preset_stage_dict(preset, stage), overrides))


def stage_train_config(cfg: dict, stage: str) -> TrainConfig:
    """TrainConfig for one stage: preset, then ``train``, then ``stage1``/``stage2``."""
    d = deep_merge(preset_stage_dict(cfg.get("preset", "toy"), stage), cfg.get("train", {}))
    d = deep_merge(d, cfg.get(f"stage{stage}", {}))
    d["seed"] = cfg["seed"]
    return TrainConfig.from_dict(d)
