"""Shared building blocks: patch ops, positional encodings, spectral and attention layers."""
from __future__ import annotations

import torch
import torch.nn as nn

__all__ = [
    "patchify",
    "unpatchify",
    "sinusoidal_positions",
    "SpectralConv2d",
    "FourierBlock",
    "TransformerBlock",
    "init_weights",
]


def patchify(field: torch.Tensor, patch: int) -> torch.Tensor:
    """(..., C, H, W) -> (..., N, C*P*P) with N = (H/P)*(W/P), row-major tokens."""
    *lead, c, h, w = field.shape
    if h % patch or w % patch:
        raise ValueError(f"patch size {patch} does not divide field {h}x{w}")
    gh, gw = h // patch, w // patch
    x = field.reshape(*lead, c, gh, patch, gw, patch)
    # (..., c, gh, py, gw, px) -> (..., gh, gw, c, py, px)
    x = x.permute(*range(len(lead)), -4, -2, -5, -3, -1)
    return x.reshape(*lead, gh * gw, c * patch * patch)


def unpatchify(tokens: torch.Tensor, patch: int, channels: int, h: int, w: int) -> torch.Tensor:
    """Exact inverse of :func:`patchify`."""
    *lead, n, flat = tokens.shape
    gh, gw = h // patch, w // patch
    if n != gh * gw or flat != channels * patch * patch:
        raise ValueError(f"token shape ({n},{flat}) inconsistent with {channels}x{h}x{w}/P={patch}")
    x = tokens.reshape(*lead, gh, gw, channels, patch, patch)
    # (..., gh, gw, c, py, px) -> (..., c, gh, py, gw, px)
    x = x.permute(*range(len(lead)), -3, -5, -2, -4, -1)
    return x.reshape(*lead, channels, h, w)


def _sincos_1d(positions: torch.Tensor, dim: int) -> torch.Tensor:
    if dim % 2:
        raise ValueError("sincos dimension must be even")
    half = dim // 2
    freqs = 1.0 / (10000.0 ** (torch.arange(half, dtype=torch.float64) / half))
    angles = positions[:, None].to(torch.float64) * freqs[None, :]
    return torch.cat([torch.sin(angles), torch.cos(angles)], dim=1)


def sinusoidal_positions(gh: int, gw: int, d_model: int) -> torch.Tensor:
    """Fixed 2D sinusoidal table (gh*gw, d): first half encodes y, second half x."""
    if d_model % 4:
        raise ValueError("d_model must be divisible by 4 for the 2D split")
    ys = torch.arange(gh, dtype=torch.float64).repeat_interleave(gw)
    xs = torch.arange(gw, dtype=torch.float64).repeat(gh)
    table = torch.cat(
        [_sincos_1d(ys, d_model // 2), _sincos_1d(xs, d_model // 2)], dim=1
    )
    return table.to(torch.float32)


class SpectralConv2d(nn.Module):
    """Truncated-mode spectral convolution with complex weights per channel pair.

    Keeps the standard two low-frequency blocks (rows [:m] and [-m:] of the
    rfft grid, columns [:m]); everything outside maps to zero. Weights are
    stored as real tensors with a trailing (re, im) axis so checkpoints stay
    float32-only.
    """

    def __init__(self, in_channels: int, out_channels: int, modes: int):
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.modes = modes
        self.weight = nn.Parameter(
            torch.empty(2, in_channels, out_channels, modes, modes, 2)
        )
        nn.init.trunc_normal_(self.weight, std=0.02)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, c, h, w = x.shape
        m = self.modes
        if 2 * m > h or m > w // 2 + 1:
            raise ValueError(f"{m} retained modes do not fit a {h}x{w} field")
        x_ft = torch.fft.rfft2(x)
        wgt = torch.view_as_complex(self.weight)
        out = torch.zeros(
            b, self.out_channels, h, w // 2 + 1, dtype=x_ft.dtype, device=x.device
        )
        out[:, :, :m, :m] = torch.einsum("bixy,ioxy->boxy", x_ft[:, :, :m, :m], wgt[0])
        out[:, :, -m:, :m] = torch.einsum("bixy,ioxy->boxy", x_ft[:, :, -m:, :m], wgt[1])
        return torch.fft.irfft2(out, s=(h, w))


class FourierBlock(nn.Module):
    """Spectral + local 3x3 convolution in parallel, GroupNorm MLP, scaled residual.

    The residual scale initializes to zero, so a freshly built block is the
    identity map; depth turns on smoothly during training.
    """

    def __init__(self, hidden: int, modes: int, mlp_ratio: int = 2):
        super().__init__()
        self.spectral = SpectralConv2d(hidden, hidden, modes)
        self.local = nn.Conv2d(hidden, hidden, 3, padding=1)
        groups = 8 if hidden % 8 == 0 else 1
        self.norm = nn.GroupNorm(groups, hidden)
        self.mlp = nn.Sequential(
            nn.Conv2d(hidden, mlp_ratio * hidden, 1),
            nn.GELU(),
            nn.Conv2d(mlp_ratio * hidden, hidden, 1),
        )
        self.res_scale = nn.Parameter(torch.zeros(hidden, 1, 1))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        y = self.spectral(x) + self.local(x)
        y = self.mlp(self.norm(y))
        return x + self.res_scale * y


class TransformerBlock(nn.Module):
    """Pre-LN self-attention block with a GELU MLP."""

    def __init__(self, d_model: int, heads: int, mlp_ratio: int = 2):
        super().__init__()
        self.norm1 = nn.LayerNorm(d_model)
        self.attn = nn.MultiheadAttention(d_model, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(d_model)
        self.mlp = nn.Sequential(
            nn.Linear(d_model, mlp_ratio * d_model),
            nn.GELU(),
            nn.Linear(mlp_ratio * d_model, d_model),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.norm1(x)
        x = x + self.attn(h, h, h, need_weights=False)[0]
        return x + self.mlp(self.norm2(x))


def init_weights(module: nn.Module) -> None:
    """Truncated-normal(0.02) projections, zero biases; apply() over a model."""
    if isinstance(module, (nn.Linear, nn.Conv2d)):
        nn.init.trunc_normal_(module.weight, std=0.02)
        if module.bias is not None:
            nn.init.zeros_(module.bias)
    elif isinstance(module, nn.MultiheadAttention):
        nn.init.trunc_normal_(module.in_proj_weight, std=0.02)
        if module.in_proj_bias is not None:
            nn.init.zeros_(module.in_proj_bias)
    elif isinstance(module, (nn.LayerNorm, nn.GroupNorm)):
        nn.init.ones_(module.weight)
        nn.init.zeros_(module.bias)


def apply_init(root: nn.Module) -> None:
    root.apply(init_weights)
    # out_proj of MultiheadAttention is a submodule Linear, already covered
