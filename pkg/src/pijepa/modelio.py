"""Model checkpoint I/O: typed save/load over the PJCK container.

The metadata echo carries enough configuration to rebuild the module graph,
so a checkpoint is loadable with no side channel; stored tensor shapes are
validated against the rebuilt modules.
"""
from __future__ import annotations

from dataclasses import asdict

import numpy as np

from .errors import CheckpointShapeError
from .fields import NormStats
from .models import (
    EncoderConfig,
    FnoConfig,
    PredictorConfig,
    load_checkpoint,
    load_into_module,
    module_tensors,
    save_checkpoint,
)
from .models.core import FnoSurrogate, PiJepaModel, SurrogateModel

__all__ = [
    "save_jepa",
    "save_surrogate",
    "save_fno",
    "load_model",
    "optimizer_tensors",
]


def optimizer_tensors(opt, named_params: list[tuple[str, object]]) -> dict[str, np.ndarray]:
    """AdamW moments and step counters as flat float32 tensors."""
    by_param = {id(p): name for name, p in named_params}
    out: dict[str, np.ndarray] = {}
    for p, state in opt.state.items():
        name = by_param.get(id(p))
        if name is None:
            continue
        for key in ("exp_avg", "exp_avg_sq", "step"):
            if key in state:
                val = state[key]
                arr = val.detach().cpu().numpy() if hasattr(val, "detach") else np.asarray(val)
                out[f"opt/{name}/{key}"] = arr.astype("<f4")
    return out


def _dummy_stats(channels: tuple[str, ...]) -> NormStats:
    return NormStats(channels, np.zeros(len(channels)), np.ones(len(channels)))


def save_jepa(
    path: str,
    model: PiJepaModel,
    system: str,
    step: int = 0,
    extra_tensors: dict[str, np.ndarray] | None = None,
) -> None:
    tensors = module_tensors(model, "jepa/")
    tensors.update(extra_tensors or {})
    meta = {
        "kind": "jepa",
        "system": system,
        "channels": list(model.channels),
        "enc": asdict(model.enc_cfg),
        "pred": asdict(model.pred_cfg),
        "step": step,
    }
    save_checkpoint(path, tensors, meta)


def save_surrogate(path: str, model: SurrogateModel, system: str, step: int = 0) -> None:
    tensors = module_tensors(model, "surrogate/")
    meta = {
        "kind": "surrogate",
        "system": system,
        "channels": list(model.jepa.channels),
        "data_channels": list(model.data_channels),
        "out_channels": list(model.out_channels),
        "enc": asdict(model.jepa.enc_cfg),
        "pred": asdict(model.jepa.pred_cfg),
        "step": step,
    }
    save_checkpoint(path, tensors, meta)


def save_fno(path: str, model: FnoSurrogate, system: str, step: int = 0) -> None:
    tensors = module_tensors(model, "fno/")
    meta = {
        "kind": "fno",
        "system": system,
        "in_channels": list(model.in_channels),
        "out_channels": list(model.out_channels),
        "fno": asdict(model.fno.cfg),
        "step": step,
    }
    save_checkpoint(path, tensors, meta)


def load_model(path: str):
    """Rebuild the module graph from the metadata echo and load tensors.

    Returns (model, meta); raises CheckpointShapeError when a stored tensor
    does not match the shape the config implies.
    """
    tensors, meta = load_checkpoint(path)
    if meta is None or "kind" not in meta:
        raise CheckpointShapeError(f"{path}: checkpoint has no model metadata")
    kind = meta["kind"]
    if kind == "jepa":
        enc = EncoderConfig(**meta["enc"])
        pred = PredictorConfig(**meta["pred"])
        channels = tuple(meta["channels"])
        model = PiJepaModel(enc, pred, channels, _dummy_stats(channels))
        load_into_module(
            model, {k: v for k, v in tensors.items() if k.startswith("jepa/")}, "jepa/"
        )
        return model, meta
    if kind == "surrogate":
        enc = EncoderConfig(**meta["enc"])
        pred = PredictorConfig(**meta["pred"])
        channels = tuple(meta["channels"])
        jepa = PiJepaModel(enc, pred, channels, _dummy_stats(channels))
        model = SurrogateModel(
            jepa, tuple(meta["out_channels"]), tuple(meta["data_channels"])
        )
        load_into_module(model, tensors, "surrogate/")
        return model, meta
    if kind == "fno":
        cfg = FnoConfig(**meta["fno"])
        in_ch = tuple(meta["in_channels"])
        out_ch = tuple(meta["out_channels"])
        stats = _dummy_stats(tuple(dict.fromkeys(in_ch + out_ch)))
        model = FnoSurrogate(cfg, in_ch, out_ch, stats)
        load_into_module(model, tensors, "fno/")
        return model, meta
    raise CheckpointShapeError(f"{path}: unknown checkpoint kind {kind!r}")
