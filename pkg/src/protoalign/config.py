"""Experiment configuration: defaults, YAML files, dotted-key overrides.

An empty config file resolves to the desk-scale profile (small synthetic
data, short schedules) so the full pipeline runs in minutes on a laptop
core. ``profile: paper`` switches the training section to the full-scale
reference hyperparameters (SGD 0.05 for 100 epochs with x0.1 decays at
60/80, then Adam 1e-3 for 600 epochs, lambda 2.5). Every run persists its
fully-resolved config next to its outputs.
"""

from __future__ import annotations

import copy
from dataclasses import asdict
from pathlib import Path

import yaml

from .data import SynthConfig
from .encoders import EncoderConfig
from .errors import ConfigError
from .evaluation import EvalSpec
from .objectives import ObjectiveConfig
from .training import Stage1Config, Stage2Config, TrainConfig

PROFILES = ("desk", "paper")


def _desk_train() -> dict:
    return {
        "stage1": {
            "optimizer": "sgd",
            "lr": 0.05,
            "momentum": 0.9,
            "weight_decay": 0.0005,
            "epochs": 8,
            "batch_size": 64,
            "decay_epochs": [6],
            "decay_factor": 0.1,
        },
        "stage2": {
            "optimizer": "adam",
            "lr": 0.001,
            "epochs": 40,
            "batches_per_epoch": 1,
            "tasks_per_batch": 4,
            "n_way": 5,
            "k_shot": 1,
            "q_per_class": 15,
            "use_vs_alignment": True,
            "objective": {"lambda_vs": 2.5, "tau_cls": 10.0, "tau_vs": 0.1},
            "select_on_val": False,
            "val_interval": 10,
            "val_episodes": 60,
        },
        "stage1_checkpoint": None,
    }


def _paper_train() -> dict:
    d = asdict(TrainConfig())  # dataclass defaults mirror the reference recipe
    train = {"stage1": d["stage1"], "stage2": d["stage2"], "stage1_checkpoint": None}
    train["stage1"]["decay_epochs"] = list(train["stage1"]["decay_epochs"])
    return train


def default_config(profile: str = "desk") -> dict:
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile {profile!r}; expected one of {PROFILES}")
    cfg = {
        "profile": profile,
        "seed": 0,
        "dataset": {
            "manifest": None,
            "descriptions": None,
            "synth": {
                "n_base_classes": 10,
                "n_val_classes": 4,
                "n_novel_classes": 6,
                "examples_per_class": 30,
                "image_shape": [16, 16, 1],
                "latent_dim": 12,
                "semantic_dim": 512,
                "descriptions_per_class": 3,
                "sigma_between": 1.0,
                "sigma_within": 0.25,
                "informativeness": 0.8,
                "description_kind": "vector",
                "text_tokens_per_description": 12,
                "text_signature_tokens": 8,
                "text_filler_vocab": 256,
            },
        },
        "encoder": {
            "architecture": "reference-conv4-small",
            "input_shape": [16, 16, 1],
            "conv_widths": [8, 16, 32, 64],
            "mlp_hidden": 32,
            "output_dim": 64,
        },
        "semantic": {"projection": "frozen", "text_embed_dim": 512},
        "train": _desk_train() if profile == "desk" else _paper_train(),
        "eval": {
            "checkpoint": None,
            "split": "novel",
            "n_way": 5,
            "k_shot": 1,
            "q_per_class": 15,
            "n_episodes": 600,
            "seed": None,  # null: fall back to the top-level seed
        },
        "compare": {
            "conditions": [
                {
                    "label": "meta-baseline",
                    "overrides": {"train.stage2.use_vs_alignment": False},
                },
                {"label": "vs-aligned", "overrides": {}},
            ]
        },
    }
    return cfg


def _merge(base: dict, incoming: dict, path: str = ""):
    for key, value in incoming.items():
        here = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"unknown config key {here!r}")
        if isinstance(base[key], dict) and isinstance(value, dict):
            _merge(base[key], value, here)
        else:
            base[key] = value


def set_dotted(cfg: dict, dotted: str, value):
    """Set one already-typed value at a dotted path; the key must exist."""
    keys = dotted.split(".")
    node = cfg
    for key in keys[:-1]:
        if not isinstance(node, dict) or key not in node:
            raise ConfigError(f"unknown config key {dotted!r}")
        node = node[key]
    leaf = keys[-1]
    if not isinstance(node, dict) or leaf not in node:
        raise ConfigError(f"unknown config key {dotted!r}")
    node[leaf] = value


def apply_override(cfg: dict, dotted: str, raw_value: str):
    """Apply one ``a.b.c=value`` override; the value is parsed as YAML."""
    try:
        value = yaml.safe_load(raw_value)
    except yaml.YAMLError as e:
        raise ConfigError(f"cannot parse override value {raw_value!r}: {e}") from None
    set_dotted(cfg, dotted, value)


def load_config(
    path=None, overrides=(), seed: int | None = None, no_vs: bool = False
) -> dict:
    """Resolve defaults <- file <- dotted overrides <- explicit flags."""
    file_cfg = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        try:
            file_cfg = yaml.safe_load(p.read_text()) or {}
        except yaml.YAMLError as e:
            raise ConfigError(f"bad YAML in {p}: {e}") from None
        if not isinstance(file_cfg, dict):
            raise ConfigError(f"config root must be a mapping, got {type(file_cfg).__name__}")

    pairs = []
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override must look like key.path=value, got {item!r}")
        pairs.append(item.split("=", 1))

    profile = file_cfg.get("profile", "desk")
    for key, value in pairs:
        if key == "profile":
            profile = yaml.safe_load(value)
    cfg = default_config(profile)
    _merge(cfg, file_cfg)
    for key, value in pairs:
        apply_override(cfg, key, value)
    if seed is not None:
        cfg["seed"] = int(seed)
    if no_vs:
        cfg["train"]["stage2"]["use_vs_alignment"] = False
    validate_config(cfg)
    return cfg


def validate_config(cfg: dict):
    """Eagerly build every typed section so bad values fail fast."""
    synth_config_from(cfg)
    train_config_from(cfg)
    eval_spec_from(cfg)


def dump_config(cfg: dict, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(yaml.safe_dump(cfg, sort_keys=True))
    return path


def synth_config_from(cfg: dict) -> SynthConfig:
    try:
        return SynthConfig(**cfg["dataset"]["synth"])
    except (TypeError, ValueError) as e:
        raise ConfigError(f"bad dataset.synth section: {e}") from None


def train_config_from(cfg: dict) -> TrainConfig:
    t = copy.deepcopy(cfg["train"])
    t.pop("stage1_checkpoint", None)
    try:
        objective = ObjectiveConfig(**t["stage2"].pop("objective"))
        return TrainConfig(
            stage1=Stage1Config(**t["stage1"]),
            stage2=Stage2Config(objective=objective, **t["stage2"]),
            encoder=EncoderConfig(**cfg["encoder"]),
            seed=int(cfg["seed"]),
            semantic_projection=cfg["semantic"]["projection"],
            text_embed_dim=int(cfg["semantic"]["text_embed_dim"]),
        )
    except (TypeError, ValueError) as e:
        raise ConfigError(f"bad train/encoder/semantic section: {e}") from None


def eval_spec_from(cfg: dict) -> EvalSpec:
    e = cfg["eval"]
    seed = e["seed"] if e["seed"] is not None else cfg["seed"]
    try:
        return EvalSpec(
            split=e["split"],
            n_way=int(e["n_way"]),
            k_shot=int(e["k_shot"]),
            q_per_class=int(e["q_per_class"]),
            n_episodes=int(e["n_episodes"]),
            seed=int(seed),
        )
    except (TypeError, ValueError) as e2:
        raise ConfigError(f"bad eval section: {e2}") from None
