"""Run configuration: a nested key/value tree loaded from YAML, validated
against the default schema (unknown keys are rejected before any work), with
dotted-path overrides and a content hash echoed beside every run's outputs.
"""

import copy
import hashlib
import json
from pathlib import Path

import yaml

from .errors import ConfigError
from .losses import LossWeights
from .model import ModelConfig
from .pipeline import TilingConfig, TrainConfig
from .scenegen import DegradeConfig, SceneConfig

DEFAULT_CONFIG = {
    "data": {
        "root": "data",
        "h": 128,
        "w": 256,
        "n_objects": 10,
        "d_min": 1.0,
        "d_max": 80.0,
        "n_train": 12,
        "n_val": 5,
        "seed": 7,
    },
    "degrade": {
        "band": 3,
        "drop_rate": 0.7,
        "warp_a": 1.4,
        "warp_b": 2.0,
        "seed": 99,
    },
    "model": {
        "widths": [8, 16, 24, 32, 48, 64],
        "fuse_levels": 6,
        "leaky_slope": 0.01,
        "d_min_clamp": 0.01,
        "coarse_downsample": 4,
        "coarse_head_bias": 9.0,
        "seed": 3,
    },
    "tiling": {
        "mode": "grid16",
        "patch_h": 32,
        "patch_w": 64,
        "random_n": 128,
        "seed": 11,
    },
    "loss": {
        "lambda1": 0.1,
        "lambda2": 0.1,
        "tau": 0.03,
        "pairs_n": 512,
        "edge_bias": 0.5,
        "silog_alpha": 10.0,
        "silog_beta": 0.15,
    },
    "train": {
        "lr": 0.01,
        "refiner_lr": 0.003,
        "batch_size": 4,
        "seed": 5,
        "epochs_coarse": 100,
        "epochs_refiner": 60,
        "epochs_silog": 24,
        "epochs_dsd": 6,
        "hflip": False,
    },
    "eval": {
        "split": "val",
        "pred_dir": None,
        "checkpoint": None,
        "domain": "real",
        "see_radius": 1,
        "sobel_rel_threshold": 0.05,
        "edge_tol": 1,
        "dbe_theta": 10.0,
        "figures_n": 4,
    },
    "infer": {
        "checkpoint": None,
        "split": "val",
    },
}


def _check_unknown(given, schema, path=""):
    for key, value in given.items():
        here = f"{path}.{key}" if path else key
        if key not in schema:
            raise ConfigError(f"unknown config key {here!r}")
        if isinstance(schema[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {here!r} must be a section")
            _check_unknown(value, schema[key], here)


def _merge(base, override):
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def load_config(path=None):
    """Defaults merged with the YAML file at path (if given)."""
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path is not None:
        with open(path) as f:
            given = yaml.safe_load(f) or {}
        if not isinstance(given, dict):
            raise ConfigError(f"config file {path} must hold a mapping")
        _check_unknown(given, DEFAULT_CONFIG)
        cfg = _merge(cfg, given)
    return cfg


def apply_overrides(cfg, overrides):
    """Apply `--set dotted.key=value` pairs; values parse as YAML scalars."""
    cfg = copy.deepcopy(cfg)
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like key=value")
        key, _, raw = item.partition("=")
        parts = key.strip().split(".")
        node = cfg
        schema = DEFAULT_CONFIG
        for part in parts[:-1]:
            if not isinstance(schema, dict) or part not in schema:
                raise ConfigError(f"unknown config key {key!r}")
            schema = schema[part]
            node = node.setdefault(part, {})
        leaf = parts[-1]
        if not isinstance(schema, dict) or leaf not in schema:
            raise ConfigError(f"unknown config key {key!r}")
        node[leaf] = yaml.safe_load(raw)
    return cfg


def config_hash(cfg):
    return hashlib.sha256(
        json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


def write_echo(cfg, out_dir):
    """Write the effective config and its hash beside the run outputs."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    echo = {"config": cfg, "hash": config_hash(cfg)}
    path = out_dir / "config_echo.json"
    with open(path, "w") as f:
        json.dump(echo, f, indent=2, sort_keys=True)
        f.write("\n")
    return echo["hash"]


# ---------------------------------------------------------------------------
# dataclass adapters
# ---------------------------------------------------------------------------

def scene_config(cfg):
    d = cfg["data"]
    return SceneConfig(h=d["h"], w=d["w"], n_objects=d["n_objects"],
                       d_min=d["d_min"], d_max=d["d_max"])


def degrade_config(cfg):
    d = cfg["degrade"]
    return DegradeConfig(band=d["band"], drop_rate=d["drop_rate"],
                         warp_a=d["warp_a"], warp_b=d["warp_b"], seed=d["seed"])


def model_config(cfg):
    m = cfg["model"]
    return ModelConfig(widths=tuple(m["widths"]), fuse_levels=m["fuse_levels"],
                       leaky_slope=m["leaky_slope"], d_min_clamp=m["d_min_clamp"],
                       coarse_downsample=m["coarse_downsample"],
                       coarse_head_bias=m["coarse_head_bias"], seed=m["seed"])


def tiling_config(cfg):
    t = cfg["tiling"]
    return TilingConfig(mode=t["mode"], patch_h=t["patch_h"], patch_w=t["patch_w"],
                        random_n=t["random_n"], seed=t["seed"])


def loss_weights(cfg):
    ls = cfg["loss"]
    return LossWeights(lambda1=ls["lambda1"], lambda2=ls["lambda2"],
                       silog_alpha=ls["silog_alpha"], silog_beta=ls["silog_beta"])


def train_config(cfg):
    t = cfg["train"]
    ls = cfg["loss"]
    return TrainConfig(lr=t["lr"], refiner_lr=t["refiner_lr"],
                       batch_size=t["batch_size"], seed=t["seed"],
                       epochs_coarse=t["epochs_coarse"],
                       epochs_refiner=t["epochs_refiner"],
                       epochs_silog=t["epochs_silog"], epochs_dsd=t["epochs_dsd"],
                       hflip=t["hflip"], pairs_n=ls["pairs_n"], tau=ls["tau"],
                       edge_bias=ls["edge_bias"], loss=loss_weights(cfg),
                       model=model_config(cfg), tiling=tiling_config(cfg))
