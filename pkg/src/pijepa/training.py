"""Pretraining and fine-tuning loops, evaluation, and autoregressive rollout.

Training is single-threaded and fully deterministic given (init_seed,
data_seed): the init seed fixes parameter initialization, the data seed fixes
batch order, masks, and collocation draws, and the two never mix.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace

import numpy as np
import torch

from .errors import NumericalError
from .fields import (
    LABEL_READS,
    FieldSnapshot,
    NormStats,
    Trajectory,
    _unchecked_snapshot,
    normalize,
)
from .models import (
    EmaSchedule,
    EncoderConfig,
    FnoConfig,
    PredictorConfig,
    build_fno_surrogate,
    build_jepa,
    build_surrogate,
    ema_update,
)
from .models.core import FnoSurrogate, PiJepaModel, SurrogateModel
from .modelio import optimizer_tensors
from .numerics import SeededRng
from .objectives import (
    AblationFlags,
    CollocationSet,
    LossWeights,
    TrainingBatch,
    build_physics_bundle,
    pressure_residual,
    sample_mask,
    total_loss,
)
from .solvers import system_suboperators

__all__ = [
    "TrainConfig",
    "RolloutConfig",
    "cosine_lr",
    "pretrain",
    "PretrainResult",
    "finetune",
    "train_fno",
    "evaluate",
    "per_field_errors",
    "rollout",
    "RolloutResult",
    "pooled_embedding_std",
    "output_channels_for",
]


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 16
    pretrain_epochs: int = 50
    finetune_epochs: int = 30
    lr_pretrain: float = 1.5e-4
    lr_head: float = 5e-4
    encoder_lr_mult: float = 0.2
    eta_min: float = 1e-6
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 5e-2
    clip_grad_norm: float = 1.0
    clip_update_norm: float = 1.0
    n_colloc: int = 128
    init_seed: int = 0
    data_seed: int = 0

    def __post_init__(self) -> None:
        if self.lr_pretrain <= 0 or self.lr_head <= 0:
            raise ValueError("learning rates must be positive")
        if not (0.0 <= self.encoder_lr_mult <= 1.0):
            raise ValueError("encoder LR multiplier must lie in [0, 1]")


@dataclass(frozen=True)
class RolloutConfig:
    steps: int = 10
    sigma_start: float = 1e-2
    sigma_end: float = 1e-4
    seed: int = 0

    def __post_init__(self) -> None:
        if self.sigma_start < self.sigma_end:
            raise ValueError("noise must anneal downward (sigma_start >= sigma_end)")
        if self.sigma_end < 0:
            raise ValueError("noise scales must be non-negative")
        if self.sigma_end == 0 and self.sigma_start > 0:
            raise ValueError("geometric annealing needs sigma_end > 0 (or both zero)")

    def sigma(self, step: int) -> float:
        if self.sigma_start == 0.0:
            return 0.0
        if self.steps <= 1:
            return self.sigma_start
        frac = step / (self.steps - 1)
        return self.sigma_start * (self.sigma_end / self.sigma_start) ** frac


def cosine_lr(step: int, total: int, base: float, eta_min: float = 1e-6) -> float:
    """Cosine decay: exactly ``base`` at step 0 and ``eta_min`` at step ``total``."""
    t = min(max(step, 0), total) / max(total, 1)
    return eta_min + 0.5 * (base - eta_min) * (1.0 + math.cos(math.pi * t))


def output_channels_for(system: str) -> tuple[str, ...]:
    """Solution channels the supervised task predicts at final time."""
    return {
        "darcy1": ("p_w",),
        "twophase": ("p_w", "S_w"),
        "adr": ("c_1", "c_2"),
    }[system]


def _stage_channel_map(system: str, channels: tuple[str, ...]) -> list[list[int]]:
    """Which state channels each predictor stage's decode updates in rollout."""
    ci = {name: i for i, name in enumerate(channels)}
    conc = [ci[c] for c in channels if c.startswith("c_")]
    if system == "darcy1":
        return [[ci["p_w"]]]
    if system == "twophase":
        return [[ci["p_w"]], [ci["S_w"]]]
    if system == "adr":
        return [[ci["p_w"]], conc, conc]
    raise ValueError(f"unknown system {system!r}")


class _PairSampler:
    """Uniform (trajectory, start index) pairs one macro step apart."""

    def __init__(self, pool: list[Trajectory], rng: SeededRng):
        self.pool = pool
        self.rng = rng
        self.strides = [t.substeps for t in pool]
        for t in pool:
            if len(t.snapshots) <= t.substeps:
                raise ValueError("trajectory too short to form a training pair")

    def draw(self, batch_size: int) -> list[tuple[Trajectory, int]]:
        out = []
        for _ in range(batch_size):
            i = int(self.rng.gen.integers(0, len(self.pool)))
            traj = self.pool[i]
            hi = len(traj.snapshots) - traj.substeps
            t0 = int(self.rng.gen.integers(0, hi))
            out.append((traj, t0))
        return out


def _batch_tensors(
    pairs: list[tuple[Trajectory, int]],
    stats: NormStats,
    system: str,
    with_physics: bool,
    dtype: torch.dtype = torch.float32,
) -> TrainingBatch:
    f_t, f_n, phys = [], [], []
    for traj, t0 in pairs:
        a = traj.snapshots[t0]
        b = traj.snapshots[t0 + traj.substeps]
        f_t.append(normalize(a, stats).data)
        f_n.append(normalize(b, stats).data)
        if with_physics:
            phys.append(a.data.astype(np.float64))
    bundle = None
    if with_physics:
        traj0 = pairs[0][0]
        bundle = build_physics_bundle(
            system,
            traj0.grid,
            traj0.channels,
            np.stack(phys),
            traj0.static_params,
            dtype,
        )
    return TrainingBatch(
        field_t=torch.tensor(np.stack(f_t), dtype=dtype),
        field_next=torch.tensor(np.stack(f_n), dtype=dtype),
        bundle=bundle,
    )


def _online_params(model: PiJepaModel) -> list[torch.nn.Parameter]:
    return [p for p in model.online_modules().parameters() if p.requires_grad]


def _clip_update_norm(
    params: list[torch.nn.Parameter], before: list[torch.Tensor], cap: float
) -> None:
    """Rescale the optimizer step so the global update norm stays <= cap."""
    with torch.no_grad():
        sq = sum(float(((p - b) ** 2).sum()) for p, b in zip(params, before))
        norm = math.sqrt(sq)
        if norm > cap > 0:
            scale = cap / norm
            for p, b in zip(params, before):
                p.copy_(b + (p - b) * scale)


@dataclass
class PretrainResult:
    model: PiJepaModel
    stats: NormStats
    losses: list[dict]
    labels_read: int
    total_steps: int
    opt_state: dict | None = None  # AdamW moments, flat float32 tensors


def pretrain(
    pool: list[Trajectory],
    system: str,
    enc_cfg: EncoderConfig,
    pred_cfg: PredictorConfig,
    weights: LossWeights,
    cfg: TrainConfig,
    flags: AblationFlags = AblationFlags(),
    loss_csv: str | None = None,
) -> PretrainResult:
    """Label-free pretraining on the unlabeled pool.

    Per step: sample a field pair and a block mask, run the encoder/predictor
    chain, take an AdamW step on the total objective with gradient- and
    update-norm clipping, then EMA-update the target encoder with the annealed
    momentum. Aborts with step index and term breakdown on NaN. Labeled
    final-time outputs are never read; the instrumented counter proves it.
    """
    if not pool:
        raise ValueError("unlabeled pool is empty")
    torch.set_num_threads(1)
    labels_before = LABEL_READS.value

    channels = pool[0].channels
    grid = pool[0].grid
    k_stages = len(system_suboperators(system))
    pred_cfg = replace(pred_cfg, count=k_stages)
    if flags.monolithic:
        pred_cfg = pred_cfg.monolithic()

    stats = NormStats.from_snapshots([s for t in pool for s in t.snapshots])
    model = build_jepa(
        enc_cfg.with_channels(len(channels)), pred_cfg, channels, stats, cfg.init_seed
    )

    steps_per_epoch = max(1, len(pool) // cfg.batch_size)
    total_steps = cfg.pretrain_epochs * steps_per_epoch
    ema_sched = EmaSchedule(total_steps=max(total_steps, 1))

    data_rng = SeededRng(cfg.data_seed, stream=101)
    mask_rng = SeededRng(cfg.data_seed, stream=102)
    colloc_rng = SeededRng(cfg.data_seed, stream=103)
    sampler = _PairSampler(pool, data_rng)

    params = _online_params(model)
    opt = torch.optim.AdamW(
        params, lr=cfg.lr_pretrain, betas=cfg.betas, weight_decay=cfg.weight_decay
    )

    use_physics = not flags.no_physics and weights.lambda_p > 0
    rows: list[dict] = []
    for step in range(total_steps):
        pairs = sampler.draw(cfg.batch_size)
        batch = _batch_tensors(pairs, stats, system, use_physics)
        mask = sample_mask(
            enc_cfg.token_grid, mask_rng, uniform=flags.uniform_masking
        )
        colloc = (
            CollocationSet.sample(grid, model.stage_count, cfg.n_colloc, colloc_rng)
            if use_physics
            else None
        )
        loss, bd = total_loss(step, model, batch, weights, mask, colloc, flags)
        if not torch.isfinite(loss):
            raise NumericalError(f"NaN loss at pretraining step {step}: {bd}")

        opt.zero_grad()
        loss.backward()
        torch.nn.utils.clip_grad_norm_(params, cfg.clip_grad_norm)
        for group in opt.param_groups:
            group["lr"] = cosine_lr(step, total_steps, cfg.lr_pretrain, cfg.eta_min)
        before = [p.detach().clone() for p in params]
        opt.step()
        _clip_update_norm(params, before, cfg.clip_update_norm)
        ema_update(model.target_encoder, model.context_encoder, ema_sched.tau(step))

        bd["step"] = step
        rows.append(bd)

    labels_read = LABEL_READS.value - labels_before
    if loss_csv is not None and rows:
        _write_loss_csv(loss_csv, rows, model.stage_count)
    opt_state = optimizer_tensors(
        opt, [(n, p) for n, p in model.named_parameters() if p.requires_grad]
    )
    return PretrainResult(model, stats, rows, labels_read, total_steps, opt_state)


def _write_loss_csv(path: str, rows: list[dict], k_stages: int) -> None:
    cols = ["step", "total", "pred"] + [f"phys_{k}" for k in range(1, k_stages + 1)] + ["reg"]
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(cols)
        for r in rows:
            writer.writerow([r.get(c, 0.0) for c in cols])


# ---------------------------------------------------------------------------
# Supervised fine-tuning
# ---------------------------------------------------------------------------


def _supervised_batches(
    trajs: list[Trajectory],
    stats: NormStats,
    out_channels: tuple[str, ...],
    batch_size: int,
    rng: SeededRng,
):
    """Shuffled (input, target) tensors per epoch; targets read final labels."""
    order = rng.gen.permutation(len(trajs))
    for lo in range(0, len(trajs), batch_size):
        chunk = [trajs[i] for i in order[lo : lo + batch_size]]
        xs = np.stack([normalize(t.initial(), stats).data for t in chunk])
        ys = []
        for t in chunk:
            label = t.labeled_output()
            ys.append(
                np.stack([normalize(label, stats).channel(c) for c in out_channels])
            )
        yield torch.tensor(xs), torch.tensor(np.stack(ys))


def _relative_l2(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Per-sample ||err|| / ||target|| over all output channels, batch mean."""
    flat_p = pred.reshape(pred.shape[0], -1)
    flat_t = target.reshape(target.shape[0], -1)
    num = (flat_p - flat_t).norm(dim=1)
    den = flat_t.norm(dim=1).clamp_min(1e-12)
    return (num / den).mean()


def finetune(
    jepa: PiJepaModel | None,
    labeled: list[Trajectory],
    n_labeled: int,
    system: str,
    cfg: TrainConfig,
    enc_cfg: EncoderConfig | None = None,
    pred_cfg: PredictorConfig | None = None,
) -> tuple[SurrogateModel, list[float]]:
    """Supervised fine-tuning of encoder + head (+ adapter) on N labeled runs.

    ``jepa=None`` is the scratch baseline: the same architecture from random
    initialization. The encoder group trains at ``encoder_lr_mult`` times the
    head learning rate under one cosine schedule.
    """
    if n_labeled < 1 or n_labeled > len(labeled):
        raise ValueError(f"n_labeled={n_labeled} not available in pool of {len(labeled)}")
    torch.set_num_threads(1)
    subset = labeled[:n_labeled]
    channels = subset[0].channels
    out_channels = output_channels_for(system)

    if jepa is None:
        if enc_cfg is None or pred_cfg is None:
            raise ValueError("scratch mode needs encoder and predictor configs")
        stats = NormStats.from_snapshots(
            [t.initial() for t in subset] + [t.snapshots[-1] for t in subset]
        )
        k_stages = len(system_suboperators(system))
        jepa = build_jepa(
            enc_cfg.with_channels(len(channels)),
            replace(pred_cfg, count=k_stages),
            channels,
            stats,
            cfg.init_seed,
        )
    stats = NormStats(
        jepa.channels,
        jepa.norm_mean.numpy().astype(np.float64),
        jepa.norm_std.numpy().astype(np.float64),
    )

    model = build_surrogate(jepa, out_channels, cfg.init_seed + 1, channels)
    enc_params, head_params = model.finetune_parameter_groups()
    opt = torch.optim.AdamW(
        [
            {"params": enc_params, "lr": cfg.lr_head * cfg.encoder_lr_mult},
            {"params": head_params, "lr": cfg.lr_head},
        ],
        betas=cfg.betas,
        weight_decay=cfg.weight_decay,
    )
    steps_per_epoch = max(1, math.ceil(n_labeled / cfg.batch_size))
    total_steps = cfg.finetune_epochs * steps_per_epoch
    data_rng = SeededRng(cfg.data_seed, stream=201)

    curve: list[float] = []
    step = 0
    for _ in range(cfg.finetune_epochs):
        epoch_losses = []
        for xs, ys in _supervised_batches(
            subset, stats, out_channels, cfg.batch_size, data_rng
        ):
            loss = _relative_l2(model(xs), ys)
            if not torch.isfinite(loss):
                raise NumericalError(f"NaN loss at fine-tuning step {step}")
            opt.zero_grad()
            loss.backward()
            torch.nn.utils.clip_grad_norm_(
                enc_params + head_params, cfg.clip_grad_norm
            )
            base = cosine_lr(step, total_steps, cfg.lr_head, cfg.eta_min)
            opt.param_groups[0]["lr"] = base * cfg.encoder_lr_mult
            opt.param_groups[1]["lr"] = base
            opt.step()
            epoch_losses.append(float(loss.detach()))
            step += 1
        curve.append(float(np.mean(epoch_losses)))
    return model, curve


def train_fno(
    labeled: list[Trajectory],
    n_labeled: int,
    system: str,
    cfg: TrainConfig,
    fno_cfg: FnoConfig | None = None,
    physics_weight: float = 0.0,
) -> tuple[FnoSurrogate, list[float]]:
    """Supervised FNO baseline; ``physics_weight > 0`` adds the elliptic
    pressure residual on the network output (the PINO variant)."""
    if n_labeled < 1 or n_labeled > len(labeled):
        raise ValueError(f"n_labeled={n_labeled} not available in pool of {len(labeled)}")
    torch.set_num_threads(1)
    subset = labeled[:n_labeled]
    channels = subset[0].channels
    out_channels = output_channels_for(system)
    stats = NormStats.from_snapshots(
        [t.initial() for t in subset] + [t.snapshots[-1] for t in subset]
    )
    grid0 = subset[0].grid
    fno_cfg = fno_cfg or FnoConfig(
        in_channels=len(channels),
        out_channels=len(out_channels),
        modes=min(12, grid0.h // 2, grid0.w // 2),
    )
    model = build_fno_surrogate(fno_cfg, channels, out_channels, stats, cfg.init_seed)
    opt = torch.optim.AdamW(
        model.parameters(), lr=cfg.lr_head, betas=cfg.betas, weight_decay=cfg.weight_decay
    )
    steps_per_epoch = max(1, math.ceil(n_labeled / cfg.batch_size))
    total_steps = cfg.finetune_epochs * steps_per_epoch
    data_rng = SeededRng(cfg.data_seed, stream=301)
    colloc_rng = SeededRng(cfg.data_seed, stream=302)

    use_physics = physics_weight > 0 and "p_w" in out_channels
    grid = subset[0].grid
    out_p = out_channels.index("p_w") if use_physics else 0

    curve: list[float] = []
    step = 0
    for _ in range(cfg.finetune_epochs):
        epoch_losses = []
        order = data_rng.gen.permutation(n_labeled)
        for lo in range(0, n_labeled, cfg.batch_size):
            chunk = [subset[i] for i in order[lo : lo + cfg.batch_size]]
            xs = np.stack([normalize(t.initial(), stats).data for t in chunk])
            ys = np.stack(
                [
                    np.stack(
                        [normalize(t.labeled_output(), stats).channel(c) for c in out_channels]
                    )
                    for t in chunk
                ]
            )
            x_t = torch.tensor(xs)
            pred = model(x_t)
            loss = _relative_l2(pred, torch.tensor(ys))
            if use_physics:
                phys = np.stack([t.initial().data.astype(np.float64) for t in chunk])
                bundle = build_physics_bundle(
                    system,
                    grid,
                    channels,
                    phys,
                    chunk[0].static_params,
                    torch.float32,
                )
                p_phys = pred[:, out_p] * float(model.out_std[out_p]) + float(
                    model.out_mean[out_p]
                )
                rows = colloc_rng.gen.integers(1, grid.h - 1, size=cfg.n_colloc)
                cols = colloc_rng.gen.integers(1, grid.w - 1, size=cfg.n_colloc)
                r = pressure_residual(p_phys, bundle)
                loss = loss + physics_weight * (r[:, rows, cols] ** 2).mean()
            if not torch.isfinite(loss):
                raise NumericalError(f"NaN loss at baseline step {step}")
            opt.zero_grad()
            loss.backward()
            torch.nn.utils.clip_grad_norm_(list(model.parameters()), cfg.clip_grad_norm)
            for g in opt.param_groups:
                g["lr"] = cosine_lr(step, total_steps, cfg.lr_head, cfg.eta_min)
            opt.step()
            epoch_losses.append(float(loss.detach()))
            step += 1
        curve.append(float(np.mean(epoch_losses)))
    return model, curve


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


@torch.no_grad()
def _predict_physical(model, snapshot: FieldSnapshot) -> np.ndarray:
    """Physical-space prediction of the output channels from an initial state."""
    if isinstance(model, FnoSurrogate):
        mean = model.in_mean.numpy()[:, None, None]
        std = model.in_std.numpy()[:, None, None]
        x = (snapshot.data.astype(np.float64) - mean) / std
        y = model(torch.tensor(x[None], dtype=torch.float32))[0]
        return model.to_physical(y).numpy()
    jepa = model.jepa
    x = jepa.to_normalized(torch.tensor(snapshot.data.astype(np.float32))[None])
    y = model(x)[0]
    std = jepa.norm_std[model.out_idx].view(-1, 1, 1)
    mean = jepa.norm_mean[model.out_idx].view(-1, 1, 1)
    return (y * std + mean).numpy()


def per_field_errors(model, pool: list[Trajectory], system: str) -> tuple[list[float], int]:
    """Relative L2 errors per test field; zero-norm truths are skipped and counted."""
    out_channels = output_channels_for(system)
    errors: list[float] = []
    skipped = 0
    for traj in pool:
        truth_snap = traj.labeled_output()
        truth = np.stack(
            [truth_snap.channel(c).astype(np.float64) for c in out_channels]
        )
        denom = float(np.linalg.norm(truth))
        if denom == 0.0:
            skipped += 1
            continue
        pred = _predict_physical(model, traj.initial()).astype(np.float64)
        errors.append(float(np.linalg.norm(pred - truth) / denom))
    return errors, skipped


def evaluate(model, pool: list[Trajectory], system: str) -> float:
    """Mean relative L2 error over a held-out pool."""
    errors, _ = per_field_errors(model, pool, system)
    if not errors:
        raise ValueError("no evaluable fields in the test pool")
    return float(np.mean(errors))


# ---------------------------------------------------------------------------
# Rollout
# ---------------------------------------------------------------------------


@dataclass
class RolloutResult:
    snapshots: list[FieldSnapshot]
    truncated_at: int | None = None
    saturation_range: tuple[float, float] | None = None  # pre-clamp extremes

    def to_trajectory(self, grid, seed: int, static: dict) -> Trajectory:
        if len(self.snapshots) < 2:
            raise ValueError("rollout too short to form a trajectory")
        return Trajectory(grid, seed, self.snapshots, static_params=dict(static))


@torch.no_grad()
def rollout(
    jepa: PiJepaModel,
    u0: FieldSnapshot,
    system: str,
    cfg: RolloutConfig,
) -> RolloutResult:
    """Closed-loop autoregressive rollout in latent space.

    Each step encodes the current decoded field, advances through the K
    predictor stages at every patch position, injects annealed latent noise
    into the final latent, and decodes the per-stage state updates. No ground
    truth is consumed after the initial state; NaN truncates with diagnostics.
    """
    torch.set_num_threads(1)
    noise_rng = SeededRng(cfg.seed, stream=401)
    channels = jepa.channels
    stage_map = _stage_channel_map(system, channels)
    if len(stage_map) != jepa.stage_count:
        raise ValueError(
            f"model has {jepa.stage_count} stages but system {system!r} expects {len(stage_map)}"
        )
    all_idx = torch.arange(jepa.enc_cfg.n_tokens)
    sat_idx = channels.index("S_w") if "S_w" in channels else None

    snaps = [u0]
    current = u0.data.astype(np.float32).copy()
    s_min, s_max = np.inf, -np.inf
    for step in range(cfg.steps):
        x = jepa.to_normalized(torch.tensor(current[None]))
        tokens = jepa.context_encoder(x)
        z = tokens
        decoded = []
        for k in range(1, jepa.stage_count + 1):
            z = jepa.predictors.stage(k, z, all_idx)
            if k == jepa.stage_count and cfg.sigma(step) > 0:
                eps = torch.tensor(
                    noise_rng.gen.standard_normal(z.shape).astype(np.float32)
                )
                z = z + cfg.sigma(step) * eps
            decoded.append(jepa.to_physical(jepa.decode(k, z)))
        new = current.copy()
        for k, idxs in enumerate(stage_map):
            for c in idxs:
                new[c] = decoded[k][0, c].numpy()
        if not np.isfinite(new).all():
            return RolloutResult(snaps, truncated_at=step, saturation_range=(s_min, s_max))
        if sat_idx is not None:
            s = new[sat_idx]
            s_min, s_max = min(s_min, float(s.min())), max(s_max, float(s.max()))
            new[sat_idx] = np.clip(s, 0.0, 1.0)
        snaps.append(_unchecked_snapshot(channels, new))
        current = new
    return RolloutResult(
        snaps,
        truncated_at=None,
        saturation_range=(s_min, s_max) if sat_idx is not None else None,
    )


# ---------------------------------------------------------------------------
# Diagnostics
# ---------------------------------------------------------------------------


@torch.no_grad()
def pooled_embedding_std(
    result: PretrainResult,
    pool: list[Trajectory],
    enc_cfg: EncoderConfig,
    n_samples: int = 32,
    seed: int = 0,
) -> float:
    """Mean per-dimension std of pooled final-stage embeddings (collapse probe).

    Each probe sample draws its own field pair and mask, matching the
    population whose batch statistics the regularizer constrains across
    training steps. A collapsed model (mask- and data-independent predictions)
    scores near zero.
    """
    model, stats = result.model, result.stats
    rng = SeededRng(seed, stream=501)
    sampler = _PairSampler(pool, rng)
    pooled = []
    for _ in range(n_samples):
        pairs = sampler.draw(1)
        batch = _batch_tensors(pairs, stats, "unused", with_physics=False)
        mask = sample_mask(enc_cfg.token_grid, rng)
        ctx = torch.as_tensor(mask.context)
        tgt = torch.as_tensor(mask.target)
        z_ctx = model.encode_context(batch.field_t, ctx)
        preds = model.predictors.chain(z_ctx, tgt)
        pooled.append(preds[-1].mean(dim=1)[0])
    stack = torch.stack(pooled)
    return float(stack.std(dim=0, unbiased=True).mean())
