"""Run configuration: a strict key-value tree with named presets.

Configs are JSON files mirroring DEFAULT_CONFIG; unknown keys are errors and
the message carries the full key path. Presets a through e retrace the
ablation ladder: baseline objective, mask-aware labels, a second feature
network, progressive growing, and a doubled-depth generator.
"""
from __future__ import annotations

import copy
import json
from dataclasses import dataclass
from pathlib import Path

from .errors import ConfigError
from .generator import GeneratorConfig
from .trainer import TrainSchedule, config_hash_of

DEFAULT_CONFIG = {
    "seed": 0,
    "out_dir": "runs/default",
    "dataset": {
        "root": "data/synth",
        "count": 256,
        "height": 72,
        "width": 40,
    },
    "generator": {
        "resolutions": [[18, 10], [36, 20], [72, 40]],
        "channels": {"18": 128, "36": 128, "72": 64},
        "blocks_per_stage": 1,
        "style_dim": 128,
        "latent_dim": 64,
        "lrelu_slope": 0.2,
    },
    "projector": {
        "feature_seeds": [11],
        "feature_widths": [32, 64, 128, 256],
        "projection_seed": 7,
        "identity_projection": False,
    },
    "trainer": {
        "stage_budgets": [50000, 50000, 50000],
        "batch_size": 16,
        "lr": 0.002,
        "beta1": 0.0,
        "beta2": 0.99,
        "ema_beta": 0.9976,
        "ema_warmup": True,
        "flip_prob": 0.5,
        "sigma_max_ref": 10.0,
        "sigma_ref_height": 288,
        "fade_budget": 50000,
        "objective": "mask_aware",
        "loss_kind": "softplus",
        "g_loss_all_patches": False,
        "progressive": True,
        "d_width": 128,
        "d_batchnorm": True,
        "checkpoint_every": 0,
        "sample_every": 0,
    },
    "metrics": {
        "ppl_pairs": 128,
        "ppl_epsilon": 1e-4,
        "eval_seed": 1234,
    },
}

PRESETS = {
    "config-a": {
        "trainer": {"objective": "baseline", "progressive": False},
        "projector": {"feature_seeds": [11]},
        "generator": {"blocks_per_stage": 1},
    },
    "config-b": {
        "trainer": {"objective": "mask_aware", "progressive": False},
        "projector": {"feature_seeds": [11]},
        "generator": {"blocks_per_stage": 1},
    },
    "config-c": {
        "trainer": {"objective": "mask_aware", "progressive": False},
        "projector": {"feature_seeds": [11, 13]},
        "generator": {"blocks_per_stage": 1},
    },
    "config-d": {
        "trainer": {"objective": "mask_aware", "progressive": True},
        "projector": {"feature_seeds": [11, 13]},
        "generator": {"blocks_per_stage": 1},
    },
    "config-e": {
        "trainer": {"objective": "mask_aware", "progressive": True},
        "projector": {"feature_seeds": [11, 13]},
        "generator": {"blocks_per_stage": 2},
    },
}

# Keys whose dict values are open mappings rather than fixed sub-trees.
_OPEN_DICT_PATHS = {"generator.channels"}


def _merge(base: dict, override: dict, path="") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        key_path = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"unknown config key: {key_path}")
        current = base[key]
        if isinstance(current, dict) and key_path not in _OPEN_DICT_PATHS:
            if not isinstance(value, dict):
                raise ConfigError(f"{key_path}: expected a table, got {type(value).__name__}")
            out[key] = _merge(current, value, key_path)
            continue
        if isinstance(current, bool) != isinstance(value, bool):
            raise ConfigError(f"{key_path}: expected {type(current).__name__}")
        if isinstance(current, (int, float)) and not isinstance(value, (int, float)):
            raise ConfigError(f"{key_path}: expected a number")
        if isinstance(current, str) and not isinstance(value, str):
            raise ConfigError(f"{key_path}: expected a string")
        if isinstance(current, list) and not isinstance(value, list):
            raise ConfigError(f"{key_path}: expected a list")
        if isinstance(current, dict) and not isinstance(value, dict):
            raise ConfigError(f"{key_path}: expected a table")
        out[key] = copy.deepcopy(value)
    return out


@dataclass(frozen=True)
class RunConfig:
    """Validated configuration tree plus the typed objects derived from it."""

    tree: dict
    seed: int
    out_dir: str
    gen_config: GeneratorConfig
    schedule: TrainSchedule
    feature_seeds: tuple
    feature_widths: tuple
    projection_seed: int
    identity_projection: bool
    dataset_root: str
    dataset_count: int
    dataset_resolution: tuple
    ppl_pairs: int
    ppl_epsilon: float
    eval_seed: int

    @property
    def config_hash(self) -> str:
        return config_hash_of(self.tree)


def resolve_config(user_tree: dict | None = None, preset: str | None = None,
                   seed: int | None = None, out_dir: str | None = None) -> RunConfig:
    """Merge defaults <- preset <- user tree <- CLI overrides and validate."""
    tree = copy.deepcopy(DEFAULT_CONFIG)
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        tree = _merge(tree, PRESETS[preset])
    if user_tree is not None:
        if not isinstance(user_tree, dict):
            raise ConfigError("config root must be a table")
        tree = _merge(tree, user_tree)
    if seed is not None:
        tree["seed"] = int(seed)
    if out_dir is not None:
        tree["out_dir"] = str(out_dir)

    g = tree["generator"]
    try:
        gen_config = GeneratorConfig(
            resolutions=tuple(tuple(r) for r in g["resolutions"]),
            channels={int(k): int(v) for k, v in g["channels"].items()},
            blocks_per_stage=int(g["blocks_per_stage"]),
            style_dim=int(g["style_dim"]),
            latent_dim=int(g["latent_dim"]),
            lrelu_slope=float(g["lrelu_slope"]),
        )
    except (ValueError, KeyError) as e:
        raise ConfigError(f"generator: {e}") from e

    t = tree["trainer"]
    budgets = tuple(int(b) for b in t["stage_budgets"])
    if len(budgets) != len(gen_config.resolutions):
        raise ConfigError(
            f"trainer.stage_budgets: {len(budgets)} entries for "
            f"{len(gen_config.resolutions)} resolutions")
    try:
        schedule = TrainSchedule(
            stage_budgets=budgets,
            batch_size=int(t["batch_size"]),
            lr=float(t["lr"]),
            beta1=float(t["beta1"]),
            beta2=float(t["beta2"]),
            ema_beta=float(t["ema_beta"]),
            ema_warmup=bool(t["ema_warmup"]),
            flip_prob=float(t["flip_prob"]),
            sigma_max_ref=float(t["sigma_max_ref"]),
            sigma_ref_height=int(t["sigma_ref_height"]),
            fade_budget=int(t["fade_budget"]),
            objective=str(t["objective"]),
            loss_kind=str(t["loss_kind"]),
            g_loss_all_patches=bool(t["g_loss_all_patches"]),
            progressive=bool(t["progressive"]),
            d_width=int(t["d_width"]),
            d_batchnorm=bool(t["d_batchnorm"]),
            checkpoint_every=int(t["checkpoint_every"]),
            sample_every=int(t["sample_every"]),
        )
    except ValueError as e:
        raise ConfigError(f"trainer: {e}") from e

    d = tree["dataset"]
    m = tree["metrics"]
    return RunConfig(
        tree=tree,
        seed=int(tree["seed"]),
        out_dir=str(tree["out_dir"]),
        gen_config=gen_config,
        schedule=schedule,
        feature_seeds=tuple(int(s) for s in tree["projector"]["feature_seeds"]),
        feature_widths=tuple(int(wd) for wd in tree["projector"]["feature_widths"]),
        projection_seed=int(tree["projector"]["projection_seed"]),
        identity_projection=bool(tree["projector"]["identity_projection"]),
        dataset_root=str(d["root"]),
        dataset_count=int(d["count"]),
        dataset_resolution=(int(d["height"]), int(d["width"])),
        ppl_pairs=int(m["ppl_pairs"]),
        ppl_epsilon=float(m["ppl_epsilon"]),
        eval_seed=int(m["eval_seed"]),
    )


def load_config_file(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {path} is not valid JSON: {e}") from e
