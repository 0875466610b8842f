"""Operator-split predictor bank: one narrow transformer per physical sub-step."""
from __future__ import annotations

from dataclasses import dataclass, replace

import torch
import torch.nn as nn

from .layers import TransformerBlock, apply_init, sinusoidal_positions

__all__ = ["PredictorConfig", "StagePredictorBank"]


@dataclass(frozen=True)
class PredictorConfig:
    depth: int = 4
    heads: int = 6
    count: int = 2  # number of chained stages = active sub-operators
    mlp_ratio: int = 2

    def __post_init__(self) -> None:
        if self.count < 1:
            raise ValueError("need at least one predictor stage")
        if self.depth < 1:
            raise ValueError("predictor depth must be positive")

    def monolithic(self) -> "PredictorConfig":
        """Single-stage variant with matched parameter budget (depth K*depth)."""
        return replace(self, count=1, depth=self.count * self.depth)

    @classmethod
    def desk(cls, count: int = 1) -> "PredictorConfig":
        return cls(depth=2, heads=4, count=count)


class StagePredictorBank(nn.Module):
    """K chained latent predictors sharing one learned mask token.

    Stage k runs a transformer over [input tokens || position-tagged mask
    tokens] and returns the embeddings at the mask positions. Stage 1 consumes
    the context-encoder tokens; stage k > 1 consumes stage k-1's predictions.
    """

    def __init__(self, d_model: int, cfg: PredictorConfig, token_grid: tuple[int, int]):
        super().__init__()
        if d_model % cfg.heads:
            raise ValueError("d_model must be divisible by predictor head count")
        self.cfg = cfg
        self.d_model = d_model
        gh, gw = token_grid
        self.register_buffer("pos", sinusoidal_positions(gh, gw, d_model))
        self.mask_token = nn.Parameter(torch.zeros(d_model))
        self.stages = nn.ModuleList(
            nn.ModuleList(
                TransformerBlock(d_model, cfg.heads, cfg.mlp_ratio)
                for _ in range(cfg.depth)
            )
            for _ in range(cfg.count)
        )
        apply_init(self)
        nn.init.trunc_normal_(self.mask_token, std=0.02)

    @property
    def count(self) -> int:
        return self.cfg.count

    def stage(
        self, k: int, tokens: torch.Tensor, target_idx: torch.Tensor
    ) -> torch.Tensor:
        """Predicted embeddings at ``target_idx`` for stage ``k`` (1-based)."""
        if not 1 <= k <= self.cfg.count:
            raise ValueError(f"stage {k} out of range 1..{self.cfg.count}")
        b, n_in, _ = tokens.shape
        masks = self.mask_token.to(tokens.dtype) + self.pos[target_idx].to(tokens.dtype)
        seq = torch.cat([tokens, masks.unsqueeze(0).expand(b, -1, -1)], dim=1)
        for blk in self.stages[k - 1]:
            seq = blk(seq)
        return seq[:, n_in:]

    def chain(
        self, z_context: torch.Tensor, target_idx: torch.Tensor
    ) -> list[torch.Tensor]:
        """All stage outputs; element k-1 is stage k's prediction at the targets."""
        outputs = []
        z = z_context
        for k in range(1, self.cfg.count + 1):
            z = self.stage(k, z, target_idx)
            outputs.append(z)
        return outputs
