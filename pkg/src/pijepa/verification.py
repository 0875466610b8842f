"""Gradient-contract verification across the full ablation matrix.

Builds a toy two-phase setup (16x16 grid, 16-dim embeddings, float64) and
runs the finite-difference check on the total objective for every
combination of ablation switches. Backs the ``grad-check`` command and the
acceptance suite.
"""
from __future__ import annotations

import itertools

import numpy as np
import torch

from .fields import NormStats, normalize
from .gradcheck import GradReport, grad_check
from .models import EncoderConfig, PredictorConfig, build_jepa
from .numerics import Grid2D, SeededRng
from .objectives import (
    AblationFlags,
    CollocationSet,
    LossWeights,
    TrainingBatch,
    build_physics_bundle,
    sample_mask,
    total_loss,
)
from .solvers import TwoPhaseGen, generate_trajectory

__all__ = ["toy_encoder_config", "build_toy_setup", "grad_check_matrix"]


def toy_encoder_config(channels: int = 3) -> EncoderConfig:
    return EncoderConfig(
        height=16,
        width=16,
        in_channels=channels,
        patch=2,
        d_model=16,
        fourier_layers=1,
        fourier_hidden=8,
        modes=4,
        attn_layers=1,
        heads=2,
    )


def build_toy_setup(
    flags: AblationFlags = AblationFlags(),
    batch: int = 2,
    init_seed: int = 0,
    data_seed: int = 100,
):
    """Toy two-phase model + batch + mask + collocation in float64."""
    torch.set_num_threads(1)
    grid = Grid2D(16, 16, dt=1e-2)
    trajs = [
        generate_trajectory("twophase", grid, TwoPhaseGen(), 1, SeededRng(data_seed, i))
        for i in range(batch)
    ]
    channels = trajs[0].channels
    stats = NormStats.from_snapshots([s for t in trajs for s in t.snapshots])
    f_t = np.stack([normalize(t.snapshots[0], stats).data for t in trajs])
    f_n = np.stack([normalize(t.snapshots[1], stats).data for t in trajs])
    bundle = None
    if not flags.no_physics:
        phys = np.stack([t.snapshots[0].data.astype(np.float64) for t in trajs])
        bundle = build_physics_bundle(
            "twophase", grid, channels, phys, trajs[0].static_params, torch.float64
        )
    training_batch = TrainingBatch(
        field_t=torch.tensor(f_t, dtype=torch.float64),
        field_next=torch.tensor(f_n, dtype=torch.float64),
        bundle=bundle,
    )
    pred_cfg = PredictorConfig(depth=1, heads=2, count=2)
    if flags.monolithic:
        pred_cfg = pred_cfg.monolithic()
    model = build_jepa(toy_encoder_config(), pred_cfg, channels, stats, init_seed).double()
    mask = sample_mask((8, 8), SeededRng(13), uniform=flags.uniform_masking)
    colloc = None
    if bundle is not None:
        colloc = CollocationSet.sample(grid, model.stage_count, 32, SeededRng(9))
    return model, training_batch, mask, colloc


def grad_check_matrix(
    h: float = 2e-4, max_coords: int = 4, seed: int = 3
) -> dict[str, GradReport]:
    """Finite-difference check of total_loss gradients, all 16 flag combos."""
    reports: dict[str, GradReport] = {}
    for no_p, no_v, mono, uni in itertools.product([False, True], repeat=4):
        flags = AblationFlags(
            no_physics=no_p, no_vicreg=no_v, monolithic=mono, uniform_masking=uni
        )
        model, batch, mask, colloc = build_toy_setup(flags)

        def loss_fn():
            return total_loss(300, model, batch, LossWeights(), mask, colloc, flags)[0]

        report = grad_check(
            loss_fn, dict(model.named_parameters()), h=h, rng=SeededRng(seed), max_coords=max_coords
        )
        key = f"physics={'off' if no_p else 'on'},vicreg={'off' if no_v else 'on'}," \
              f"split={'off' if mono else 'on'},block_mask={'off' if uni else 'on'}"
        reports[key] = report
    return reports
