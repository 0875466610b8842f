"""Momentum (EMA) management for the target encoder."""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn

__all__ = ["EmaSchedule", "ema_update", "ema_update_tensors", "ema_lag_probe"]


@dataclass(frozen=True)
class EmaSchedule:
    """Momentum annealed tau_start -> tau_end over the first warmup fraction.

    Cosine anneal; monotone nondecreasing, constant at tau_end afterwards.
    """

    total_steps: int
    tau_start: float = 0.99
    tau_end: float = 0.999
    warmup_frac: float = 0.1

    def __post_init__(self) -> None:
        if not (0.0 <= self.tau_start <= self.tau_end < 1.0):
            raise ValueError("need 0 <= tau_start <= tau_end < 1")
        if self.total_steps < 1:
            raise ValueError("total_steps must be positive")

    def tau(self, step: int) -> float:
        warmup = max(1, int(round(self.warmup_frac * self.total_steps)))
        t = min(max(step, 0) / warmup, 1.0)
        return self.tau_start + (self.tau_end - self.tau_start) * 0.5 * (
            1.0 - math.cos(math.pi * t)
        )


@torch.no_grad()
def ema_update_tensors(target: dict, online: dict, tau: float) -> None:
    """xi <- tau * xi + (1 - tau) * theta, elementwise over matching names."""
    if target.keys() != online.keys():
        missing = set(target) ^ set(online)
        raise ValueError(f"EMA tensor sets differ: {sorted(missing)}")
    for name, t in target.items():
        o = online[name]
        if t.shape != o.shape:
            raise ValueError(f"shape mismatch on {name}: {t.shape} vs {o.shape}")
        t.mul_(tau).add_(o, alpha=1.0 - tau)


@torch.no_grad()
def ema_update(target: nn.Module, online: nn.Module, tau: float) -> None:
    ema_update_tensors(
        dict(target.named_parameters()), dict(online.named_parameters()), tau
    )


def ema_lag_probe(
    n_steps: int = 500,
    tau: float = 0.996,
    delta: float = 1.0,
    dim: int = 256,
    seed: int = 0,
) -> float:
    """Max ||xi_t - theta_t|| under norm-``delta`` updates; must stay <= delta*tau/(1-tau).

    Drives theta with nearly-constant-direction updates of exactly norm delta,
    the worst case for the lag bound, and applies the same EMA rule the
    training loop uses.
    """
    gen = torch.Generator().manual_seed(seed)
    theta = torch.randn(dim, generator=gen, dtype=torch.float64)
    xi = theta.clone()
    base_dir = torch.randn(dim, generator=gen, dtype=torch.float64)
    base_dir /= base_dir.norm()
    max_gap = 0.0
    for _ in range(n_steps):
        step = base_dir + 0.05 * torch.randn(dim, generator=gen, dtype=torch.float64)
        step *= delta / step.norm()
        theta += step
        ema_update_tensors({"w": xi}, {"w": theta}, tau)
        max_gap = max(max_gap, float((xi - theta).norm()))
    return max_gap
