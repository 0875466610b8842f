"""FNO baseline: lift, truncated spectral layers with pointwise bypass, project."""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .layers import SpectralConv2d, apply_init

__all__ = ["FnoConfig", "Fno2d"]


@dataclass(frozen=True)
class FnoConfig:
    in_channels: int = 2
    out_channels: int = 1
    width: int = 32
    modes: int = 12
    layers: int = 4


class Fno2d(nn.Module):
    def __init__(self, cfg: FnoConfig):
        super().__init__()
        self.cfg = cfg
        self.lift = nn.Conv2d(cfg.in_channels, cfg.width, 1)
        self.spectral = nn.ModuleList(
            SpectralConv2d(cfg.width, cfg.width, cfg.modes) for _ in range(cfg.layers)
        )
        self.bypass = nn.ModuleList(
            nn.Conv2d(cfg.width, cfg.width, 1) for _ in range(cfg.layers)
        )
        self.act = nn.GELU()
        self.proj = nn.Conv2d(cfg.width, cfg.out_channels, 1)
        apply_init(self)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.lift(x)
        for spec, skip in zip(self.spectral, self.bypass):
            h = self.act(spec(h) + skip(h))
        return self.proj(h)
