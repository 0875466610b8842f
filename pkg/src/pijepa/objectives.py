"""Masking, the pretraining objective, and per-sub-operator physics residuals.

The objective has three parts: a latent predictive loss against the
stop-gradient target encoder, physics residuals evaluated on decoded fields at
collocation points (one residual per predictor stage, ramped in over the first
steps), and a variance/covariance regularizer on pooled final-stage
embeddings that prevents representational collapse.

The pressure residual reuses the oracle solver's face-coefficient assembly, so
a field produced by the solver zeroes the residual to linear-solve tolerance.
The transport residuals use second-order central differences on the decoded
fields instead; they are regularizers, not oracle replicas.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .fields import CH_LOG_PERM, CH_PRESSURE, CH_SATURATION, conc_channel
from .models.core import PiJepaModel
from .numerics import Grid2D, SeededRng
from .solvers import (
    BoundaryConditions,
    TwoPhaseParams,
    brooks_corey,
    capillary_contribution,
    face_coefficients,
)

__all__ = [
    "MaskSpec",
    "sample_mask",
    "LossWeights",
    "AblationFlags",
    "CollocationSet",
    "loss_pred",
    "loss_vicreg",
    "PhysicsBundle",
    "build_physics_bundle",
    "pressure_residual",
    "saturation_residual",
    "adr_transport_residual",
    "reaction_rate_residual",
    "physics_residual",
    "TrainingBatch",
    "total_loss",
]


# ---------------------------------------------------------------------------
# Masking
# ---------------------------------------------------------------------------

_CONTEXT_BAND = (0.60, 0.70)
_TARGET_SIZES = (2, 3, 4)


@dataclass(frozen=True)
class MaskSpec:
    """Context/target patch-index sets plus the timestep pair they refer to."""

    context: np.ndarray
    target: np.ndarray
    n_tokens: int
    t: int = 0
    t_next: int = 1

    def __post_init__(self) -> None:
        ctx = np.asarray(self.context, dtype=np.int64)
        tgt = np.asarray(self.target, dtype=np.int64)
        object.__setattr__(self, "context", ctx)
        object.__setattr__(self, "target", tgt)
        if len(np.intersect1d(ctx, tgt)):
            raise ValueError("context and target patch sets must be disjoint")
        if len(set(ctx.tolist())) != ctx.size or len(set(tgt.tolist())) != tgt.size:
            raise ValueError("patch indices must be unique")
        if ctx.size and (ctx.min() < 0 or ctx.max() >= self.n_tokens):
            raise ValueError("context index out of range")
        if tgt.size and (tgt.min() < 0 or tgt.max() >= self.n_tokens):
            raise ValueError("target index out of range")
        frac = ctx.size / self.n_tokens
        if not (_CONTEXT_BAND[0] <= frac <= _CONTEXT_BAND[1]):
            raise ValueError(f"context fraction {frac:.3f} outside {_CONTEXT_BAND}")
        if tgt.size not in _TARGET_SIZES:
            raise ValueError(f"target block size {tgt.size} not in {_TARGET_SIZES}")


def _feasible_rectangles(gh: int, gw: int) -> list[tuple[int, int]]:
    n = gh * gw
    return [
        (h, w)
        for h in range(1, gh + 1)
        for w in range(1, gw + 1)
        if _CONTEXT_BAND[0] <= h * w / n <= _CONTEXT_BAND[1]
    ]


_TARGET_SHAPES = [(1, 2), (2, 1), (1, 3), (3, 1), (1, 4), (4, 1), (2, 2)]


def sample_mask(
    token_grid: tuple[int, int],
    rng: SeededRng,
    t: int = 0,
    t_next: int = 1,
    uniform: bool = False,
) -> MaskSpec:
    """Spatiotemporal block mask: context rectangle at t, target block at t_next.

    Rejection-samples a contiguous rectangle hitting the 60-70% area band and
    a disjoint contiguous target block of 2-4 patches. ``uniform=True`` is the
    masking ablation: independently drawn context patches instead of a block.
    Deterministic per rng state.
    """
    gh, gw = token_grid
    if gh < 4 or gw < 4:
        raise ValueError(f"token grid {gh}x{gw} too small to satisfy the mask bands")
    n = gh * gw
    gen = rng.gen

    if uniform:
        n_ctx = int(round(0.65 * n))
        context = np.sort(gen.choice(n, size=n_ctx, replace=False))
        rest = np.setdiff1d(np.arange(n), context)
        size = int(gen.integers(2, 5))
        target = np.sort(gen.choice(rest, size=size, replace=False))
        return MaskSpec(context, target, n, t, t_next)

    rects = _feasible_rectangles(gh, gw)
    if not rects:
        raise ValueError(
            f"token grid {gh}x{gw} too small: no rectangle hits the 60-70% area band"
        )
    h, w = rects[int(gen.integers(0, len(rects)))]
    y0 = int(gen.integers(0, gh - h + 1))
    x0 = int(gen.integers(0, gw - w + 1))
    in_ctx = np.zeros((gh, gw), dtype=bool)
    in_ctx[y0 : y0 + h, x0 : x0 + w] = True
    context = np.flatnonzero(in_ctx.ravel())

    shapes = [(bh, bw) for bh, bw in _TARGET_SHAPES if bh <= gh and bw <= gw]
    for _ in range(10_000):
        bh, bw = shapes[int(gen.integers(0, len(shapes)))]
        ty = int(gen.integers(0, gh - bh + 1))
        tx = int(gen.integers(0, gw - bw + 1))
        if in_ctx[ty : ty + bh, tx : tx + bw].any():
            continue
        block = np.zeros((gh, gw), dtype=bool)
        block[ty : ty + bh, tx : tx + bw] = True
        return MaskSpec(context, np.flatnonzero(block.ravel()), n, t, t_next)
    raise ValueError(
        f"token grid {gh}x{gw} too small: no disjoint target block placement found"
    )


# ---------------------------------------------------------------------------
# Loss weights / ablation switches
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LossWeights:
    lambda_p: float = 0.1
    lambda_r: float = 1.0
    gamma: float = 0.05
    mu_r: float = 0.01
    eps: float = 1e-4
    ramp_steps: int = 200
    stage_lambda_p: tuple[float, ...] | None = None  # per-stage physics weights

    def __post_init__(self) -> None:
        for name in ("lambda_p", "lambda_r", "gamma", "mu_r", "eps"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")

    def stage_weight(self, k: int) -> float:
        if self.stage_lambda_p is not None:
            return self.stage_lambda_p[k - 1]
        return self.lambda_p

    def ramp(self, step: int) -> float:
        if self.ramp_steps <= 0:
            return 1.0
        return min(max(step, 0) / self.ramp_steps, 1.0)


@dataclass(frozen=True)
class AblationFlags:
    """Switches for the ablation matrix; the full model is all-False."""

    no_physics: bool = False
    no_vicreg: bool = False
    monolithic: bool = False  # K=1 predictor with matched parameter budget
    uniform_masking: bool = False

    VARIANTS = ("full", "no_physics", "no_split", "no_vicreg", "uniform_mask")

    @classmethod
    def from_variant(cls, name: str) -> "AblationFlags":
        table = {
            "full": cls(),
            "no_physics": cls(no_physics=True),
            "no_split": cls(monolithic=True),
            "no_vicreg": cls(no_vicreg=True),
            "uniform_mask": cls(uniform_masking=True),
        }
        try:
            return table[name]
        except KeyError:
            raise ValueError(f"unknown ablation variant {name!r}") from None


@dataclass
class CollocationSet:
    """Per-stage interior collocation points, resampled every step."""

    points: list[tuple[np.ndarray, np.ndarray]]

    @classmethod
    def sample(cls, grid: Grid2D, n_stages: int, n_points: int, rng: SeededRng) -> "CollocationSet":
        pts = []
        for _ in range(n_stages):
            rows = rng.gen.integers(1, grid.h - 1, size=n_points)
            cols = rng.gen.integers(1, grid.w - 1, size=n_points)
            pts.append((rows, cols))
        return cls(pts)


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def loss_pred(z_pred: torch.Tensor, z_target: torch.Tensor) -> torch.Tensor:
    """Mean over target patches of the squared L2 embedding error."""
    if z_pred.shape != z_target.shape:
        raise ValueError(f"prediction {tuple(z_pred.shape)} vs target {tuple(z_target.shape)}")
    return ((z_pred - z_target.detach()) ** 2).sum(dim=-1).mean()


def loss_vicreg(
    z: torch.Tensor, gamma: float = 0.05, mu_r: float = 0.01, eps: float = 1e-4
) -> torch.Tensor:
    """Variance hinge + off-diagonal covariance penalty on pooled embeddings.

    gamma * sum_j max(0, 1 - sqrt(Var_j + eps))
    + (mu_r / d) * sum_{i != j} Cov_ij^2   (ordered pairs, unbiased covariance)
    """
    if z.dim() != 2:
        raise ValueError("expected a (batch, dim) embedding matrix")
    b, d = z.shape
    if b < 2:
        raise ValueError("variance/covariance regularizer needs batch size >= 2")
    var = z.var(dim=0, unbiased=True)
    hinge = torch.relu(1.0 - torch.sqrt(var + eps)).sum()
    zc = z - z.mean(dim=0)
    cov = zc.T @ zc / (b - 1)
    off = (cov**2).sum() - (torch.diagonal(cov) ** 2).sum()
    return gamma * hinge + (mu_r / d) * off


# ---------------------------------------------------------------------------
# Differentiable finite differences (model side)
# ---------------------------------------------------------------------------


def _diff1_t(f: torch.Tensor, h: float, dim: int) -> torch.Tensor:
    """Torch mirror of the oracle stencils: central interior, one-sided edges."""
    g = f.movedim(dim, 0)
    interior = (g[2:] - g[:-2]) / (2.0 * h)
    first = ((-3.0 * g[0] + 4.0 * g[1] - g[2]) / (2.0 * h)).unsqueeze(0)
    last = ((3.0 * g[-1] - 4.0 * g[-2] + g[-3]) / (2.0 * h)).unsqueeze(0)
    return torch.cat([first, interior, last], dim=0).movedim(0, dim)


def fd_grad_t(f: torch.Tensor, grid: Grid2D) -> tuple[torch.Tensor, torch.Tensor]:
    return _diff1_t(f, grid.dx, -1), _diff1_t(f, grid.dy, -2)


def fd_div_t(vx: torch.Tensor, vy: torch.Tensor, grid: Grid2D) -> torch.Tensor:
    return _diff1_t(vx, grid.dx, -1) + _diff1_t(vy, grid.dy, -2)


# ---------------------------------------------------------------------------
# Physics residuals
# ---------------------------------------------------------------------------


@dataclass
class PhysicsBundle:
    """Constants a residual evaluation needs, precomputed from raw data.

    Face transmissibilities come from the oracle assembly with mobilities at
    the previous timestep (the IMPES convention), so they are constants with
    respect to the decoded fields.
    """

    system: str
    grid: Grid2D
    channels: tuple[str, ...]
    tx: torch.Tensor
    ty: torch.Tensor
    diag: torch.Tensor
    rhs_total: torch.Tensor  # q_T * vol + Dirichlet - explicit capillary, FV units
    lamk_cell: torch.Tensor
    q_w: torch.Tensor
    s_prev: torch.Tensor | None = None
    c_prev: torch.Tensor | None = None
    fluid: TwoPhaseParams | None = None
    porosity: float = 0.2
    dt: float = 1e-2
    d_coeff: float = 0.0
    v_scale: float = 1.0
    nu: tuple[float, ...] = (1.0, 1.0)

    def stage_count(self) -> int:
        return {"darcy1": 1, "twophase": 2, "adr": 3}[self.system]


def _bc_from_static(static: dict) -> BoundaryConditions:
    def side(name):
        v = static.get(name)
        if v is None or (isinstance(v, float) and np.isnan(v)):
            return None
        return float(v)

    return BoundaryConditions(
        p_left=side("p_left"),
        p_right=side("p_right"),
        p_top=side("p_top"),
        p_bottom=side("p_bottom"),
        s_inflow=static.get("s_inflow"),
    )


def _fluid_from_static(static: dict) -> TwoPhaseParams:
    return TwoPhaseParams(
        mu_w=static.get("mu_w", 1.0),
        mu_n=static.get("mu_n", 1.0),
        lam=static.get("lam", 2.0),
        s_wr=static.get("s_wr", 0.0),
        s_nr=static.get("s_nr", 0.0),
        p_entry=static.get("p_entry", 0.0),
        porosity=static.get("porosity", 0.2),
        bc=_bc_from_static(static),
    )


def build_physics_bundle(
    system: str,
    grid: Grid2D,
    channels: tuple[str, ...],
    snap_t: np.ndarray,
    static: dict,
    dtype: torch.dtype = torch.float32,
) -> PhysicsBundle:
    """Assemble residual constants from the physical-space batch at time t.

    ``snap_t`` is (B, C, H, W) float64 in physical units. Transmissibilities
    are computed with the same routines the oracle solver uses.
    """
    snap_t = np.asarray(snap_t, dtype=np.float64)
    b = snap_t.shape[0]
    ci = {name: i for i, name in enumerate(channels)}
    logk = snap_t[:, ci[CH_LOG_PERM]]
    k = np.exp(logk)
    fluid = _fluid_from_static(static)
    bc = fluid.bc

    tx = np.empty((b, grid.h, grid.w - 1))
    ty = np.empty((b, grid.h - 1, grid.w))
    diag = np.empty((b, grid.h, grid.w))
    rhs = np.empty((b, grid.h, grid.w))
    lamk_all = np.empty((b, grid.h, grid.w))
    s_prev = None
    c_prev = None

    if system == "twophase":
        s_prev = snap_t[:, ci[CH_SATURATION]]
    if system == "adr":
        n_c = sum(1 for name in channels if name.startswith("c_"))
        c_prev = np.stack([snap_t[:, ci[conc_channel(i + 1)]] for i in range(n_c)], axis=1)

    q_t = np.zeros(grid.shape)  # generated datasets are boundary-driven
    q_w = np.zeros(grid.shape)
    for i in range(b):
        if system == "twophase":
            lamk = brooks_corey(s_prev[i], fluid).lam_total * k[i]
        else:
            lamk = k[i]  # single-phase unit mobility
        sys_i = face_coefficients(lamk, grid, bc)
        cap = np.zeros(grid.shape)
        if system == "twophase" and fluid.p_entry > 0:
            cap, _, _ = capillary_contribution(s_prev[i], k[i], fluid, grid)
        tx[i], ty[i], diag[i] = sys_i.tx, sys_i.ty, sys_i.diag
        rhs[i] = q_t * grid.cell_volume + sys_i.rhs_bc - cap
        lamk_all[i] = lamk

    def t(x):
        return torch.tensor(x, dtype=dtype)

    return PhysicsBundle(
        system=system,
        grid=grid,
        channels=tuple(channels),
        tx=t(tx),
        ty=t(ty),
        diag=t(diag),
        rhs_total=t(rhs),
        lamk_cell=t(lamk_all),
        q_w=t(np.broadcast_to(q_w, (b, *grid.shape)).copy()),
        s_prev=None if s_prev is None else t(s_prev),
        c_prev=None if c_prev is None else t(c_prev),
        fluid=fluid,
        porosity=fluid.porosity,
        dt=grid.dt,
        d_coeff=float(static.get("d_coeff", 0.0)),
        v_scale=float(static.get("v_scale", 1.0)),
    )


def pressure_residual(p: torch.Tensor, bundle: PhysicsBundle) -> torch.Tensor:
    """Cell-wise flux imbalance of the elliptic pressure equation: A p - b.

    Exactly the oracle's five-point system applied to the decoded pressure, in
    finite-volume units (the units the linear-solver tolerance is defined on),
    so an oracle solution zeroes it to CG tolerance.
    """
    ap = bundle.diag * p
    fx = bundle.tx * (p[..., :, 1:] - p[..., :, :-1])
    ap = ap + torch.nn.functional.pad(fx, (1, 0)) - torch.nn.functional.pad(fx, (0, 1))
    fy = bundle.ty * (p[..., 1:, :] - p[..., :-1, :])
    ap = ap + torch.nn.functional.pad(fy, (0, 0, 1, 0)) - torch.nn.functional.pad(fy, (0, 0, 0, 1))
    return ap - bundle.rhs_total


def _brooks_corey_torch(s: torch.Tensor, fluid: TwoPhaseParams) -> tuple[torch.Tensor, torch.Tensor]:
    """(f_w, lam_total) as differentiable torch ops, mirroring the oracle closure."""
    s = torch.clamp(s, fluid.s_wr, fluid.s_max)
    se = (s - fluid.s_wr) / (1.0 - fluid.s_wr - fluid.s_nr)
    lam = fluid.lam
    k_rw = se ** ((2.0 + 3.0 * lam) / lam)
    k_rn = (1.0 - se) ** 2 * (1.0 - se ** ((2.0 + lam) / lam))
    lam_total = torch.clamp(k_rw / fluid.mu_w + k_rn / fluid.mu_n, min=1e-12)
    return (k_rw / fluid.mu_w) / lam_total, lam_total


def _velocity_from_pressure(
    p: torch.Tensor, bundle: PhysicsBundle
) -> tuple[torch.Tensor, torch.Tensor]:
    px, py = fd_grad_t(p, bundle.grid)
    scale = bundle.lamk_cell * bundle.v_scale
    return -scale * px, -scale * py


def saturation_residual(
    s_new: torch.Tensor, p_stage1: torch.Tensor, bundle: PhysicsBundle
) -> torch.Tensor:
    """phi dS/dt + div(f_w v_T) - q_w with v_T from the stage-1 decoded pressure.

    The time derivative is a first-order backward difference against the
    previous-timestep saturation carried in the bundle; spatial derivatives
    are central differences on the decoded fields.
    """
    if bundle.s_prev is None:
        raise ValueError("saturation residual needs the previous-timestep saturation")
    vx, vy = _velocity_from_pressure(p_stage1, bundle)
    f_w, _ = _brooks_corey_torch(s_new, bundle.fluid)
    dsdt = bundle.porosity * (s_new - bundle.s_prev) / bundle.dt
    return dsdt + fd_div_t(f_w * vx, f_w * vy, bundle.grid) - bundle.q_w


def adr_transport_residual(
    c_new: torch.Tensor, p_stage1: torch.Tensor, bundle: PhysicsBundle
) -> torch.Tensor:
    """dc/dt + v . grad(c) - div(D grad c) per species, v from decoded pressure."""
    if bundle.c_prev is None:
        raise ValueError("transport residual needs previous-timestep concentrations")
    vx, vy = _velocity_from_pressure(p_stage1, bundle)
    dcdt = (c_new - bundle.c_prev) / bundle.dt
    out = []
    for i in range(c_new.shape[1]):
        cx, cy = fd_grad_t(c_new[:, i], bundle.grid)
        adv = vx * cx + vy * cy
        diff = bundle.d_coeff * fd_div_t(cx, cy, bundle.grid)
        out.append(dcdt[:, i] + adv - diff)
    return torch.stack(out, dim=1)


def reaction_rate_residual(rates: torch.Tensor, nu: tuple[float, ...]) -> torch.Tensor:
    """Stoichiometric consistency: sum_i nu_i R_i for the single reaction.

    Purely algebraic; zero for any rate field produced by a network that
    conserves nu-weighted mass (the configured bimolecular pair does exactly).
    """
    weights = torch.tensor(nu, dtype=rates.dtype, device=rates.device)
    return (rates * weights.view(1, -1, 1, 1)).sum(dim=1)


def physics_residual(
    k: int,
    decoded: list[torch.Tensor],
    bundle: PhysicsBundle,
    colloc: tuple[np.ndarray, np.ndarray],
) -> torch.Tensor:
    """Mean squared residual of sub-operator ``k`` at the collocation points.

    ``decoded`` holds the physical-space decoded fields of stages 1..k; stage
    k > 1 residuals consume earlier stages' decodes (velocity from stage 1,
    reaction rates against stage 2).
    """
    ci = {name: i for i, name in enumerate(bundle.channels)}
    rows, cols = colloc
    u_k = decoded[k - 1]

    if k == 1:
        r = pressure_residual(u_k[:, ci[CH_PRESSURE]], bundle)
    elif bundle.system == "twophase" and k == 2:
        r = saturation_residual(
            u_k[:, ci[CH_SATURATION]], decoded[0][:, ci[CH_PRESSURE]], bundle
        )
    elif bundle.system == "adr" and k == 2:
        conc_idx = [ci[c] for c in bundle.channels if c.startswith("c_")]
        r = adr_transport_residual(
            u_k[:, conc_idx], decoded[0][:, ci[CH_PRESSURE]], bundle
        )
        return (r[..., rows, cols] ** 2).mean()
    elif bundle.system == "adr" and k == 3:
        conc_idx = [ci[c] for c in bundle.channels if c.startswith("c_")]
        rates = (u_k[:, conc_idx] - decoded[1][:, conc_idx]) / bundle.dt
        r = reaction_rate_residual(rates, bundle.nu)
    else:
        raise ValueError(f"no residual defined for system {bundle.system!r} stage {k}")
    return (r[..., rows, cols] ** 2).mean()


# ---------------------------------------------------------------------------
# Total objective
# ---------------------------------------------------------------------------


@dataclass
class TrainingBatch:
    """One pretraining batch: normalized field pair plus residual constants."""

    field_t: torch.Tensor
    field_next: torch.Tensor
    bundle: PhysicsBundle | None = None


def total_loss(
    step: int,
    model: PiJepaModel,
    batch: TrainingBatch,
    weights: LossWeights,
    mask: MaskSpec,
    colloc: CollocationSet | None = None,
    flags: AblationFlags = AblationFlags(),
) -> tuple[torch.Tensor, dict[str, float]]:
    """Predictive + ramped physics + collapse-regularizer objective.

    Returns the scalar loss and a per-term breakdown whose entries sum to the
    total. The physics weight ramps linearly from zero over
    ``weights.ramp_steps`` optimizer steps.
    """
    device = batch.field_t.device
    ctx_idx = torch.as_tensor(mask.context, dtype=torch.long, device=device)
    tgt_idx = torch.as_tensor(mask.target, dtype=torch.long, device=device)

    z_ctx = model.encode_context(batch.field_t, ctx_idx)
    z_tgt = model.encode_target(batch.field_next)[:, tgt_idx]
    preds = model.predictors.chain(z_ctx, tgt_idx)

    l_pred = loss_pred(preds[-1], z_tgt)
    total = l_pred
    breakdown = {"pred": float(l_pred.detach())}

    ramp = weights.ramp(step)
    use_physics = (
        not flags.no_physics
        and batch.bundle is not None
        and colloc is not None
        and weights.lambda_p > 0
    )
    decoded: list[torch.Tensor] = []
    for k in range(1, model.stage_count + 1):
        if not use_physics:
            breakdown[f"phys_{k}"] = 0.0
            continue
        full = model.assemble_tokens(z_ctx, ctx_idx, preds[k - 1], tgt_idx)
        decoded.append(model.to_physical(model.decode(k, full)))
        lam_k = ramp * weights.stage_weight(k)
        term = physics_residual(k, decoded, batch.bundle, colloc.points[k - 1])
        total = total + lam_k * term
        breakdown[f"phys_{k}"] = float(lam_k * term.detach())

    if not flags.no_vicreg and weights.lambda_r > 0:
        pooled = preds[-1].mean(dim=1)
        l_reg = loss_vicreg(pooled, weights.gamma, weights.mu_r, weights.eps)
        total = total + weights.lambda_r * l_reg
        breakdown["reg"] = float(weights.lambda_r * l_reg.detach())
    else:
        breakdown["reg"] = 0.0

    breakdown["total"] = float(total.detach())
    breakdown["physics_ramp"] = ramp
    return total, breakdown
