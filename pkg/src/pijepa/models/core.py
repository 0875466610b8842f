"""Model containers: the latent predictive model and the fine-tuned surrogate."""
from __future__ import annotations

import copy

import numpy as np
import torch
import torch.nn as nn

from ..fields import NormStats
from .encoder import EncoderConfig, FourierAttentionEncoder
from .fno import Fno2d, FnoConfig
from .heads import ChannelAdapter, FinetuneHead, StageFieldDecoder
from .predictor import PredictorConfig, StagePredictorBank

__all__ = [
    "PiJepaModel",
    "SurrogateModel",
    "FnoSurrogate",
    "build_jepa",
    "build_surrogate",
    "build_fno_surrogate",
]


class PiJepaModel(nn.Module):
    """Context/target encoders, stage predictor bank, per-stage field decoders.

    The target encoder is a frozen copy of the context encoder, updated only
    by EMA; it never receives gradients. Normalization statistics ride along
    as buffers so checkpoints are self-contained.
    """

    def __init__(
        self,
        enc_cfg: EncoderConfig,
        pred_cfg: PredictorConfig,
        channels: tuple[str, ...],
        stats: NormStats,
    ):
        super().__init__()
        if len(channels) != enc_cfg.in_channels:
            raise ValueError("channel list must match encoder input channels")
        self.enc_cfg = enc_cfg
        self.pred_cfg = pred_cfg
        self.channels = tuple(channels)
        self.context_encoder = FourierAttentionEncoder(enc_cfg)
        self.target_encoder = copy.deepcopy(self.context_encoder)
        self.target_encoder.requires_grad_(False)
        self.predictors = StagePredictorBank(enc_cfg.d_model, pred_cfg, enc_cfg.token_grid)
        self.decoders = nn.ModuleList(
            StageFieldDecoder(
                enc_cfg.d_model, enc_cfg.patch, len(channels), enc_cfg.token_grid
            )
            for _ in range(pred_cfg.count)
        )
        mean = np.array([stats.mean[stats.index_for(c)] for c in channels])
        std = np.array([stats.std[stats.index_for(c)] for c in channels])
        self.register_buffer("norm_mean", torch.tensor(mean, dtype=torch.float32))
        self.register_buffer("norm_std", torch.tensor(std, dtype=torch.float32))

    @property
    def stage_count(self) -> int:
        return self.pred_cfg.count

    def online_modules(self) -> nn.ModuleList:
        """Everything trained during pretraining (the target encoder is not)."""
        return nn.ModuleList([self.context_encoder, self.predictors, self.decoders])

    def encode_context(self, x: torch.Tensor, context_idx: torch.Tensor) -> torch.Tensor:
        return self.context_encoder(x, context_idx)

    @torch.no_grad()
    def encode_target(self, x: torch.Tensor) -> torch.Tensor:
        return self.target_encoder(x)

    def decode(self, k: int, full_tokens: torch.Tensor) -> torch.Tensor:
        if not 1 <= k <= self.stage_count:
            raise ValueError(f"stage {k} out of range 1..{self.stage_count}")
        return self.decoders[k - 1](full_tokens)

    def assemble_tokens(
        self,
        z_ctx: torch.Tensor,
        ctx_idx: torch.Tensor,
        z_pred: torch.Tensor,
        tgt_idx: torch.Tensor,
    ) -> torch.Tensor:
        """Full token grid: predictions at targets, encoder outputs at context.

        Patches in neither set are filled with the learned mask token plus
        positional encoding (the model's representation of "unknown").
        """
        b = z_ctx.shape[0]
        n = self.enc_cfg.n_tokens
        fill = (self.predictors.mask_token + self.predictors.pos).to(z_ctx.dtype)
        full = fill.unsqueeze(0).expand(b, n, self.enc_cfg.d_model).clone()
        full[:, ctx_idx] = z_ctx
        full[:, tgt_idx] = z_pred
        return full

    def to_physical(self, u_norm: torch.Tensor) -> torch.Tensor:
        """Invert the per-channel z-scoring (differentiable affine)."""
        std = self.norm_std.to(u_norm.dtype).view(-1, 1, 1)
        mean = self.norm_mean.to(u_norm.dtype).view(-1, 1, 1)
        return u_norm * std + mean

    def to_normalized(self, u_phys: torch.Tensor) -> torch.Tensor:
        std = self.norm_std.to(u_phys.dtype).view(-1, 1, 1)
        mean = self.norm_mean.to(u_phys.dtype).view(-1, 1, 1)
        return (u_phys - mean) / std


class SurrogateModel(nn.Module):
    """Fine-tuned surrogate: (adapter) -> context encoder -> prediction head.

    Keeps the whole latent model so rollout can reuse the predictor bank and
    decoders with the fine-tuned encoder.
    """

    def __init__(
        self,
        jepa: PiJepaModel,
        out_channels: tuple[str, ...],
        data_channels: tuple[str, ...] | None = None,
    ):
        super().__init__()
        self.jepa = jepa
        self.out_channels = tuple(out_channels)
        self.data_channels = tuple(data_channels or jepa.channels)
        self.out_idx = [self.jepa.channels.index(c) for c in self.out_channels]
        enc_cfg = jepa.enc_cfg
        self.adapter = (
            ChannelAdapter(len(self.data_channels), enc_cfg.in_channels)
            if len(self.data_channels) != enc_cfg.in_channels
            else ChannelAdapter(enc_cfg.in_channels, enc_cfg.in_channels)
        )
        self.head = FinetuneHead(
            enc_cfg.d_model, enc_cfg.patch, len(out_channels), enc_cfg.token_grid
        )

    def forward(self, x_norm: torch.Tensor) -> torch.Tensor:
        tokens = self.jepa.context_encoder(self.adapter(x_norm))
        return self.head(tokens)

    def finetune_parameter_groups(self) -> tuple[list, list]:
        """(encoder params, head+adapter params) for the LR-multiplier split."""
        enc = list(self.jepa.context_encoder.parameters())
        rest = list(self.head.parameters()) + list(self.adapter.parameters())
        return enc, rest


class FnoSurrogate(nn.Module):
    """FNO baseline wrapped with the same channel/normalization bookkeeping."""

    def __init__(
        self,
        cfg: FnoConfig,
        in_channels: tuple[str, ...],
        out_channels: tuple[str, ...],
        stats: NormStats,
    ):
        super().__init__()
        self.fno = Fno2d(cfg)
        self.in_channels = tuple(in_channels)
        self.out_channels = tuple(out_channels)
        mean = np.array([stats.mean[stats.index_for(c)] for c in in_channels])
        std = np.array([stats.std[stats.index_for(c)] for c in in_channels])
        out_mean = np.array([stats.mean[stats.index_for(c)] for c in out_channels])
        out_std = np.array([stats.std[stats.index_for(c)] for c in out_channels])
        self.register_buffer("in_mean", torch.tensor(mean, dtype=torch.float32))
        self.register_buffer("in_std", torch.tensor(std, dtype=torch.float32))
        self.register_buffer("out_mean", torch.tensor(out_mean, dtype=torch.float32))
        self.register_buffer("out_std", torch.tensor(out_std, dtype=torch.float32))

    def forward(self, x_norm: torch.Tensor) -> torch.Tensor:
        return self.fno(x_norm)

    def to_physical(self, y_norm: torch.Tensor) -> torch.Tensor:
        std = self.out_std.to(y_norm.dtype).view(-1, 1, 1)
        mean = self.out_mean.to(y_norm.dtype).view(-1, 1, 1)
        return y_norm * std + mean


def build_jepa(
    enc_cfg: EncoderConfig,
    pred_cfg: PredictorConfig,
    channels: tuple[str, ...],
    stats: NormStats,
    init_seed: int,
) -> PiJepaModel:
    torch.manual_seed(init_seed)
    return PiJepaModel(enc_cfg, pred_cfg, channels, stats)


def build_surrogate(
    jepa: PiJepaModel,
    out_channels: tuple[str, ...],
    init_seed: int,
    data_channels: tuple[str, ...] | None = None,
) -> SurrogateModel:
    torch.manual_seed(init_seed)
    return SurrogateModel(jepa, out_channels, data_channels)


def build_fno_surrogate(
    cfg: FnoConfig,
    in_channels: tuple[str, ...],
    out_channels: tuple[str, ...],
    stats: NormStats,
    init_seed: int,
) -> FnoSurrogate:
    torch.manual_seed(init_seed)
    return FnoSurrogate(cfg, in_channels, out_channels, stats)
