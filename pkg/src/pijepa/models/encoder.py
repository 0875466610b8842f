"""Fourier-enhanced encoder: convolutional stem, spectral blocks, attention over patch tokens."""
from __future__ import annotations

from dataclasses import dataclass, replace

import torch
import torch.nn as nn

from .layers import FourierBlock, TransformerBlock, apply_init, sinusoidal_positions

__all__ = ["EncoderConfig", "FourierAttentionEncoder"]


@dataclass(frozen=True)
class EncoderConfig:
    height: int = 64
    width: int = 64
    in_channels: int = 3
    patch: int = 8
    d_model: int = 384
    fourier_layers: int = 6
    fourier_hidden: int = 128
    modes: int = 32
    attn_layers: int = 4
    heads: int = 8
    mlp_ratio: int = 2
    mask_mode: str = "drop"  # "drop": keep full field, drop non-context tokens
    #                          "zero": additionally zero-fill masked pixels

    def __post_init__(self) -> None:
        if self.d_model % self.heads:
            raise ValueError("d_model must be divisible by the head count")
        if self.d_model % 4:
            raise ValueError("d_model must be divisible by 4 (2D sinusoidal split)")
        if self.height % self.patch or self.width % self.patch:
            raise ValueError("patch size must divide both grid dimensions")
        if self.mask_mode not in ("drop", "zero"):
            raise ValueError(f"unknown mask_mode {self.mask_mode!r}")

    @property
    def token_grid(self) -> tuple[int, int]:
        return (self.height // self.patch, self.width // self.patch)

    @property
    def n_tokens(self) -> int:
        gh, gw = self.token_grid
        return gh * gw

    @property
    def effective_modes(self) -> int:
        # retained modes are clamped so the two spectral blocks never overlap
        return min(self.modes, self.height // 2, self.width // 2)

    def with_channels(self, in_channels: int) -> "EncoderConfig":
        return replace(self, in_channels=in_channels)

    @classmethod
    def full(cls, in_channels: int = 3) -> "EncoderConfig":
        return cls(in_channels=in_channels)

    @classmethod
    def desk(cls, in_channels: int = 2, grid: int = 32) -> "EncoderConfig":
        """CI-scale preset preserving every structural element of the full model."""
        return cls(
            height=grid,
            width=grid,
            in_channels=in_channels,
            patch=4,
            d_model=64,
            fourier_layers=2,
            fourier_hidden=64,
            modes=8,
            attn_layers=2,
            heads=4,
        )


class FourierAttentionEncoder(nn.Module):
    """Stem -> Fourier blocks -> strided patch projection -> attention.

    In context mode (``context_idx`` given) only the selected patch tokens
    enter the attention stage; the Fourier blocks always see the full field
    ("drop" mode) unless the config asks for pixel zero-fill.
    """

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        hidden = cfg.fourier_hidden
        self.stem = nn.Conv2d(cfg.in_channels, hidden, 3, padding=1)
        self.blocks = nn.ModuleList(
            FourierBlock(hidden, cfg.effective_modes, cfg.mlp_ratio)
            for _ in range(cfg.fourier_layers)
        )
        self.to_tokens = nn.Conv2d(hidden, cfg.d_model, cfg.patch, stride=cfg.patch)
        gh, gw = cfg.token_grid
        self.register_buffer("pos", sinusoidal_positions(gh, gw, cfg.d_model))
        # per-input-channel type embedding, averaged into every token
        self.channel_type = nn.Parameter(torch.zeros(cfg.in_channels, cfg.d_model))
        self.attn = nn.ModuleList(
            TransformerBlock(cfg.d_model, cfg.heads, cfg.mlp_ratio)
            for _ in range(cfg.attn_layers)
        )
        apply_init(self)

    def _zero_fill(self, x: torch.Tensor, context_idx: torch.Tensor) -> torch.Tensor:
        gh, gw = self.cfg.token_grid
        keep = torch.zeros(gh * gw, dtype=torch.bool, device=x.device)
        keep[context_idx] = True
        pix = keep.view(gh, gw).repeat_interleave(self.cfg.patch, 0)
        pix = pix.repeat_interleave(self.cfg.patch, 1)
        return x * pix.to(x.dtype)

    def features(self, x: torch.Tensor) -> torch.Tensor:
        """Pre-patchify feature map (stem + Fourier blocks)."""
        h = self.stem(x)
        for blk in self.blocks:
            h = blk(h)
        return h

    def forward(
        self, x: torch.Tensor, context_idx: torch.Tensor | None = None
    ) -> torch.Tensor:
        if x.shape[-3] != self.cfg.in_channels or x.shape[-2:] != (
            self.cfg.height,
            self.cfg.width,
        ):
            raise ValueError(
                f"input {tuple(x.shape)} does not match encoder config "
                f"{self.cfg.in_channels}x{self.cfg.height}x{self.cfg.width}"
            )
        if context_idx is not None and self.cfg.mask_mode == "zero":
            x = self._zero_fill(x, context_idx)
        h = self.features(x)
        t = self.to_tokens(h).flatten(2).transpose(1, 2)  # (B, N, d)
        t = t + self.pos.to(t.dtype) + self.channel_type.mean(dim=0)
        if context_idx is not None:
            t = t[:, context_idx]
        for blk in self.attn:
            t = blk(t)
        return t
