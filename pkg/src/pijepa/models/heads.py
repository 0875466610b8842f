"""Field decoders: per-stage physics decoders, the fine-tuning head, channel adapter."""
from __future__ import annotations

import torch
import torch.nn as nn

from .layers import apply_init, unpatchify

__all__ = ["StageFieldDecoder", "FinetuneHead", "ChannelAdapter"]


class StageFieldDecoder(nn.Module):
    """Token-to-pixel linear + unpatchify + two 3x3 convolutions.

    Lightweight on purpose: used only as a physics-regularization pathway
    during pretraining and for field reconstruction in rollout.
    """

    def __init__(
        self,
        d_model: int,
        patch: int,
        out_channels: int,
        token_grid: tuple[int, int],
        hidden: int = 16,
    ):
        super().__init__()
        self.patch = patch
        self.hidden = hidden
        self.token_grid = token_grid
        self.to_pixels = nn.Linear(d_model, hidden * patch * patch)
        self.conv = nn.Sequential(
            nn.Conv2d(hidden, hidden, 3, padding=1),
            nn.GELU(),
            nn.Conv2d(hidden, out_channels, 3, padding=1),
        )
        apply_init(self)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        gh, gw = self.token_grid
        if tokens.shape[-2] != gh * gw:
            raise ValueError(
                f"decoder needs the full token set ({gh * gw}), got {tokens.shape[-2]}"
            )
        x = self.to_pixels(tokens)
        x = unpatchify(x, self.patch, self.hidden, gh * self.patch, gw * self.patch)
        return self.conv(x)


class FinetuneHead(nn.Module):
    """Patch embeddings -> 16-channel pixel blocks -> conv refinement -> output."""

    def __init__(
        self, d_model: int, patch: int, out_channels: int, token_grid: tuple[int, int]
    ):
        super().__init__()
        self.patch = patch
        self.token_grid = token_grid
        self.to_pixels = nn.Linear(d_model, 16 * patch * patch)
        self.refine = nn.Sequential(
            nn.Conv2d(16, 64, 3, padding=1),
            nn.GELU(),
            nn.Conv2d(64, 64, 3, padding=1),
            nn.GELU(),
            nn.Conv2d(64, out_channels, 1),
        )
        apply_init(self)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        gh, gw = self.token_grid
        if tokens.shape[-2] != gh * gw:
            raise ValueError(
                f"head needs the full token grid ({gh * gw}), got {tokens.shape[-2]}"
            )
        x = self.to_pixels(tokens)
        x = unpatchify(x, self.patch, 16, gh * self.patch, gw * self.patch)
        return self.refine(x)


class ChannelAdapter(nn.Module):
    """Learnable 1x1 projection onto the encoder's expected channel count.

    Identity-initialized whenever the channel counts already match, so a
    freshly attached adapter is a no-op.
    """

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.proj = nn.Conv2d(in_channels, out_channels, 1)
        nn.init.zeros_(self.proj.bias)
        if in_channels == out_channels:
            with torch.no_grad():
                self.proj.weight.copy_(
                    torch.eye(in_channels).view(in_channels, in_channels, 1, 1)
                )
        else:
            nn.init.trunc_normal_(self.proj.weight, std=0.02)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.proj(x)
