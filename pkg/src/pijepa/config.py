"""JSON run configuration: defaulted schema, unknown-key rejection, builders.

Experiments are driven by a config document rather than flags; flags carry
only paths and seeds. Every key has a default, the resolved document is
echoed into each output directory, and any key outside the schema is an
error before work starts.
"""
from __future__ import annotations

import copy
import json
import os
import zlib
from typing import Any

from .errors import ConfigError
from .models import EncoderConfig, FnoConfig, PredictorConfig
from .numerics import Grid2D
from .objectives import LossWeights
from .training import RolloutConfig, TrainConfig

__all__ = [
    "DEFAULTS",
    "resolve_config",
    "load_config",
    "grid_from",
    "encoder_config_from",
    "predictor_config_from",
    "fno_config_from",
    "loss_weights_from",
    "train_config_from",
    "rollout_config_from",
    "write_manifest",
]

DEFAULTS: dict[str, Any] = {
    "system": {
        "name": "darcy1",
        "corr_len": 0.1,
        "sigma_logk": 1.0,
        "two_level": False,
        "p_left": 1.0,
        "p_right": 0.0,
        "mu_w": 1.0,
        "mu_n": 0.5,
        "lam": 2.0,
        "s_wr": 0.1,
        "s_nr": 0.1,
        "p_entry": 0.0,
        "porosity": 0.2,
        "pe": 1.0,
        "da": 0.1,
        "t_steps": 10,
    },
    "grid": {"h": 32, "w": 32, "dt": 0.002},
    "solver": {"cg_tol": 1e-10},
    "data": {"n_unlabeled": 64, "n_labeled": 64, "n_test": 16, "base_seed": 0},
    "model": {
        "preset": "desk",  # "desk" or "full"
        "patch": 0,  # 0 = preset value; nonzero overrides
        "d_model": 0,
        "fourier_layers": 0,
        "fourier_hidden": 0,
        "modes": 0,
        "attn_layers": 0,
        "heads": 0,
        "predictor_depth": 0,
        "predictor_heads": 0,
        "mask_mode": "drop",
        "fno_width": 32,
        "fno_modes": 12,
        "fno_layers": 4,
    },
    "masking": {"uniform": False},
    "loss": {
        "lambda_p": 0.1,
        "lambda_r": 1.0,
        "gamma": 0.05,
        "mu_r": 0.01,
        "eps": 1e-4,
        "ramp_steps": 200,
    },
    "train": {
        "batch_size": 16,
        "pretrain_epochs": 50,
        "finetune_epochs": 30,
        "lr_pretrain": 1.5e-4,
        "lr_head": 5e-4,
        "encoder_lr_mult": 0.2,
        "eta_min": 1e-6,
        "beta1": 0.9,
        "beta2": 0.999,
        "weight_decay": 0.05,
        "clip_grad_norm": 1.0,
        "clip_update_norm": 1.0,
        "n_colloc": 128,
        "init_seed": 0,
        "data_seed": 0,
    },
    "rollout": {"steps": 10, "sigma_start": 1e-2, "sigma_end": 1e-4, "seed": 0},
    "sweep": {
        "methods": ["pijepa", "scratch", "fno"],
        "n_labeled": [8, 16, 32, 64],
        "seeds": [0, 1, 2],
        "jobs": 1,
        "ablate_n_labeled": 32,
        "ablate_variants": ["full", "no_physics", "no_split", "no_vicreg", "uniform_mask"],
    },
    "theory": {
        "n_list": [32, 64, 128],
        "n": 64,
        "d": 8,
        "k_factors": 2,
        "sigma": 0.1,
        "eps_rel": 0.5,
        "trials": 20,
        "seed": 0,
    },
    "gradcheck": {"h": 2e-4, "max_coords": 4, "tolerance": 1e-4, "seed": 3},
}


def _merge(defaults: Any, user: Any, path: str) -> Any:
    if isinstance(defaults, dict):
        if not isinstance(user, dict):
            raise ConfigError(f"{path or 'config'}: expected an object")
        out = {}
        for key, val in user.items():
            if key not in defaults:
                raise ConfigError(f"unknown config key {path + key!r}")
            out[key] = _merge(defaults[key], val, f"{path}{key}.")
        for key, val in defaults.items():
            if key not in out:
                out[key] = copy.deepcopy(val)
        return out
    # leaf: accept compatible scalar/list types
    if isinstance(defaults, bool) != isinstance(user, bool):
        raise ConfigError(f"{path[:-1]}: expected {type(defaults).__name__}")
    if isinstance(defaults, (int, float)) and isinstance(user, (int, float)):
        return user
    if type(user) is not type(defaults):
        raise ConfigError(
            f"{path[:-1]}: expected {type(defaults).__name__}, got {type(user).__name__}"
        )
    return user


def resolve_config(user: dict | None) -> dict:
    """Validate against the schema and fill every default."""
    return _merge(DEFAULTS, user or {}, "")


def load_config(path: str | None) -> dict:
    if path is None:
        return resolve_config({})
    try:
        with open(path) as f:
            user = json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from None
    return resolve_config(user)


def grid_from(cfg: dict) -> Grid2D:
    g = cfg["grid"]
    return Grid2D(h=int(g["h"]), w=int(g["w"]), dt=float(g["dt"]))


def encoder_config_from(cfg: dict, in_channels: int) -> EncoderConfig:
    m = cfg["model"]
    grid = cfg["grid"]
    if m["preset"] == "full":
        base = EncoderConfig.full(in_channels)
    elif m["preset"] == "desk":
        base = EncoderConfig.desk(in_channels, grid=int(grid["h"]))
    else:
        raise ConfigError(f"unknown model preset {m['preset']!r}")
    overrides = {
        "height": int(grid["h"]),
        "width": int(grid["w"]),
        "mask_mode": m["mask_mode"],
    }
    for key in ("patch", "d_model", "fourier_layers", "fourier_hidden", "modes", "attn_layers", "heads"):
        if m[key]:
            overrides[key] = int(m[key])
    from dataclasses import replace

    return replace(base, **overrides)


def predictor_config_from(cfg: dict) -> PredictorConfig:
    m = cfg["model"]
    if m["preset"] == "full":
        base = PredictorConfig()
    else:
        base = PredictorConfig.desk()
    from dataclasses import replace

    overrides = {}
    if m["predictor_depth"]:
        overrides["depth"] = int(m["predictor_depth"])
    if m["predictor_heads"]:
        overrides["heads"] = int(m["predictor_heads"])
    return replace(base, **overrides) if overrides else base


def fno_config_from(cfg: dict, in_channels: int, out_channels: int) -> FnoConfig:
    m = cfg["model"]
    g = cfg["grid"]
    return FnoConfig(
        in_channels=in_channels,
        out_channels=out_channels,
        width=int(m["fno_width"]),
        modes=min(int(m["fno_modes"]), int(g["h"]) // 2, int(g["w"]) // 2),
        layers=int(m["fno_layers"]),
    )


def loss_weights_from(cfg: dict) -> LossWeights:
    lo = cfg["loss"]
    return LossWeights(
        lambda_p=float(lo["lambda_p"]),
        lambda_r=float(lo["lambda_r"]),
        gamma=float(lo["gamma"]),
        mu_r=float(lo["mu_r"]),
        eps=float(lo["eps"]),
        ramp_steps=int(lo["ramp_steps"]),
    )


def train_config_from(cfg: dict) -> TrainConfig:
    t = cfg["train"]
    return TrainConfig(
        batch_size=int(t["batch_size"]),
        pretrain_epochs=int(t["pretrain_epochs"]),
        finetune_epochs=int(t["finetune_epochs"]),
        lr_pretrain=float(t["lr_pretrain"]),
        lr_head=float(t["lr_head"]),
        encoder_lr_mult=float(t["encoder_lr_mult"]),
        eta_min=float(t["eta_min"]),
        betas=(float(t["beta1"]), float(t["beta2"])),
        weight_decay=float(t["weight_decay"]),
        clip_grad_norm=float(t["clip_grad_norm"]),
        clip_update_norm=float(t["clip_update_norm"]),
        n_colloc=int(t["n_colloc"]),
        init_seed=int(t["init_seed"]),
        data_seed=int(t["data_seed"]),
    )


def rollout_config_from(cfg: dict, steps: int | None = None) -> RolloutConfig:
    r = cfg["rollout"]
    return RolloutConfig(
        steps=int(steps if steps is not None else r["steps"]),
        sigma_start=float(r["sigma_start"]),
        sigma_end=float(r["sigma_end"]),
        seed=int(r["seed"]),
    )


def write_manifest(out_dir: str, cfg: dict, command: str, artifacts: list[str]) -> None:
    """Echo the resolved config and CRC every artifact for reproducibility."""
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "resolved_config.json"), "w") as f:
        json.dump(cfg, f, indent=2, sort_keys=True)
    entries = {}
    for name in artifacts:
        path = os.path.join(out_dir, name)
        if not os.path.exists(path):
            continue
        data = open(path, "rb").read()
        entries[name] = {"bytes": len(data), "crc32": f"{zlib.crc32(data) & 0xFFFFFFFF:#010x}"}
    manifest = {
        "command": command,
        "init_seed": cfg["train"]["init_seed"],
        "data_seed": cfg["train"]["data_seed"],
        "artifacts": entries,
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
