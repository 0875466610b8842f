"""Ground-truth solvers for the three benchmark systems.

Finite-volume, cell-centered, float64 throughout. The two-phase system uses
the IMPES splitting: an implicit pressure solve (harmonic face mobilities,
conjugate gradients) followed by explicit first-order upwind saturation
transport. The reactive system splits advection-diffusion and an exactly
integrated bimolecular reaction. These solvers generate every dataset and act
as the verification oracle for the model-side physics residuals, so the face
coefficient assembly here is the single source of truth for both.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np

from .errors import CflError, NonConvergenceError
from .fields import (
    CH_LOG_PERM,
    CH_PRESSURE,
    CH_SATURATION,
    FieldSnapshot,
    Trajectory,
    conc_channel,
    generate_grf,
    permeability_from_grf,
    threshold_permeability,
)
from .numerics import CGResult, FivePointOp, Grid2D, SeededRng, sparse_solve_spd

__all__ = [
    "SubOperatorTag",
    "system_suboperators",
    "BoundaryConditions",
    "TwoPhaseParams",
    "ADRParams",
    "RelPerm",
    "brooks_corey",
    "capillary_pressure",
    "FaceSystem",
    "face_coefficients",
    "PressureSolution",
    "solve_pressure",
    "TwoPhaseState",
    "impes_step",
    "adr_step",
    "Darcy1Gen",
    "TwoPhaseGen",
    "AdrGen",
    "generate_trajectory",
]


class SubOperatorTag(IntEnum):
    PRESSURE = 1
    TRANSPORT = 2
    REACTION = 3


def system_suboperators(system: str) -> tuple[SubOperatorTag, ...]:
    """Active sub-operators, in the order they are applied."""
    table = {
        "darcy1": (SubOperatorTag.PRESSURE,),
        "twophase": (SubOperatorTag.PRESSURE, SubOperatorTag.TRANSPORT),
        "adr": (
            SubOperatorTag.PRESSURE,
            SubOperatorTag.TRANSPORT,
            SubOperatorTag.REACTION,
        ),
    }
    try:
        return table[system]
    except KeyError:
        raise ValueError(f"unknown system {system!r}") from None


@dataclass(frozen=True)
class BoundaryConditions:
    """Dirichlet pressure on left/right, no-flow top/bottom by default.

    A side set to None is no-flow. ``s_inflow`` is the wetting saturation
    carried by inflow across Dirichlet faces (defaults to 1 - S_nr).
    """

    p_left: float | None = 0.0
    p_right: float | None = 1.0
    p_top: float | None = None
    p_bottom: float | None = None
    s_inflow: float | None = None

    @property
    def any_dirichlet(self) -> bool:
        return any(
            v is not None for v in (self.p_left, self.p_right, self.p_top, self.p_bottom)
        )


@dataclass(frozen=True)
class TwoPhaseParams:
    """Brooks-Corey two-phase fluid/rock description plus sources and BCs."""

    mu_w: float = 1.0
    mu_n: float = 0.5
    lam: float = 2.0
    s_wr: float = 0.1
    s_nr: float = 0.1
    p_entry: float = 0.0
    porosity: float = 0.2
    q_w: np.ndarray | None = None
    q_n: np.ndarray | None = None
    bc: BoundaryConditions = field(default_factory=BoundaryConditions)

    def __post_init__(self) -> None:
        if self.mu_w <= 0 or self.mu_n <= 0:
            raise ValueError("viscosities must be positive")
        if self.lam <= 0:
            raise ValueError("pore-size index must be positive")
        if not (0 <= self.s_wr and 0 <= self.s_nr and self.s_wr + self.s_nr < 1):
            raise ValueError("residual saturations must satisfy 0 <= S_wr + S_nr < 1")
        if self.p_entry < 0:
            raise ValueError("entry pressure must be non-negative")
        if self.porosity <= 0:
            raise ValueError("porosity must be positive")

    @property
    def s_max(self) -> float:
        return 1.0 - self.s_nr

    def inflow_saturation(self) -> float:
        return self.bc.s_inflow if self.bc.s_inflow is not None else self.s_max

    def sources(self, grid: Grid2D) -> tuple[np.ndarray, np.ndarray]:
        z = np.zeros(grid.shape)
        qw = z if self.q_w is None else np.asarray(self.q_w, dtype=np.float64)
        qn = z if self.q_n is None else np.asarray(self.q_n, dtype=np.float64)
        return qw, qn


@dataclass
class ADRParams:
    """Advection-diffusion-reaction with a bimolecular c1 + c2 network.

    Face velocities ``vx`` (h, w+1) / ``vy`` (h+1, w) come from a Darcy solve
    or a prescribed uniform field. The reaction rates are R_1 = -k c1 c2 and
    R_2 = +k c1 c2 with stoichiometry nu = (1, 1), so nu . R vanishes
    identically. Pe and Da are recorded under the mapping Pe = |v| L / D,
    Da = k L / |v| with L = 1.
    """

    vx: np.ndarray
    vy: np.ndarray
    d_coeffs: np.ndarray
    k_r: float = 0.0
    nu: tuple[float, ...] = (1.0, 1.0)
    pe: float | None = None
    da: float | None = None

    def __post_init__(self) -> None:
        self.vx = np.asarray(self.vx, dtype=np.float64)
        self.vy = np.asarray(self.vy, dtype=np.float64)
        self.d_coeffs = np.asarray(self.d_coeffs, dtype=np.float64)
        if (self.d_coeffs < 0).any():
            raise ValueError("diffusivities must be non-negative")

    @classmethod
    def uniform(
        cls,
        grid: Grid2D,
        vx: float,
        vy: float,
        d_coeffs,
        k_r: float = 0.0,
        **kw,
    ) -> "ADRParams":
        h, w = grid.shape
        return cls(
            vx=np.full((h, w + 1), float(vx)),
            vy=np.full((h + 1, w), float(vy)),
            d_coeffs=np.asarray(d_coeffs, dtype=np.float64),
            k_r=k_r,
            **kw,
        )


# ---------------------------------------------------------------------------
# Brooks-Corey closures
# ---------------------------------------------------------------------------

_LAMBDA_FLOOR = 1e-12


@dataclass(frozen=True)
class RelPerm:
    k_rw: np.ndarray
    k_rn: np.ndarray
    f_w: np.ndarray
    lam_total: np.ndarray
    floored: bool  # total mobility hit the 1e-12 floor somewhere


def brooks_corey(s_w: np.ndarray, params: TwoPhaseParams) -> RelPerm:
    """Relative permeabilities, fractional flow, total mobility.

    k_rw = S_e^((2+3L)/L), k_rn = (1-S_e)^2 (1 - S_e^((2+L)/L)) with
    S_e = (S_w - S_wr) / (1 - S_wr - S_nr); S_w is clamped to the mobile range
    before S_e. Total mobility is floored at 1e-12 where both phases are
    immobile, and the result is flagged.
    """
    s = np.clip(np.asarray(s_w, dtype=np.float64), params.s_wr, params.s_max)
    se = (s - params.s_wr) / (1.0 - params.s_wr - params.s_nr)
    lam = params.lam
    k_rw = se ** ((2.0 + 3.0 * lam) / lam)
    k_rn = (1.0 - se) ** 2 * (1.0 - se ** ((2.0 + lam) / lam))
    lam_total = k_rw / params.mu_w + k_rn / params.mu_n
    floored = bool((lam_total < _LAMBDA_FLOOR).any())
    lam_total = np.maximum(lam_total, _LAMBDA_FLOOR)
    f_w = (k_rw / params.mu_w) / lam_total
    return RelPerm(k_rw, k_rn, f_w, lam_total, floored)


def capillary_pressure(s_w: np.ndarray, params: TwoPhaseParams) -> np.ndarray:
    """Brooks-Corey P_c = p_e S_e^(-1/lambda); zero when p_e = 0."""
    if params.p_entry == 0.0:
        return np.zeros_like(np.asarray(s_w, dtype=np.float64))
    s = np.clip(np.asarray(s_w, dtype=np.float64), params.s_wr, params.s_max)
    se = (s - params.s_wr) / (1.0 - params.s_wr - params.s_nr)
    se = np.maximum(se, 1e-6)  # entry-pressure curve diverges at S_e = 0
    return params.p_entry * se ** (-1.0 / params.lam)


# ---------------------------------------------------------------------------
# Pressure system assembly
# ---------------------------------------------------------------------------


def _harmonic(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return 2.0 * a * b / (a + b)


@dataclass
class FaceSystem:
    """Face transmissibilities and Dirichlet bookkeeping for one mobility field.

    ``tx``/``ty`` are interior-face transmissibilities, ``diag`` the Dirichlet
    half-cell contributions folded onto the diagonal, and ``rhs_bc`` the
    matching right-hand-side term; all in finite-volume (volume-integrated)
    units. ``bx_left`` etc. keep the boundary-face transmissibilities for
    velocity reconstruction.
    """

    tx: np.ndarray
    ty: np.ndarray
    diag: np.ndarray
    rhs_bc: np.ndarray
    bx_left: np.ndarray
    bx_right: np.ndarray
    by_bottom: np.ndarray
    by_top: np.ndarray

    def operator(self) -> FivePointOp:
        return FivePointOp(tx=self.tx, ty=self.ty, diag=self.diag)


def face_coefficients(
    lamk: np.ndarray, grid: Grid2D, bc: BoundaryConditions
) -> FaceSystem:
    """Assemble harmonic-averaged face transmissibilities for -div(lamk grad p).

    ``lamk`` holds cell values of mobility times permeability. Dirichlet sides
    connect through a half-cell distance; no-flow sides contribute nothing.
    """
    lamk = np.asarray(lamk, dtype=np.float64)
    if (lamk <= 0).any():
        raise ValueError("mobility * permeability must be positive everywhere")
    h, w = grid.shape
    dx, dy = grid.dx, grid.dy
    tx = _harmonic(lamk[:, :-1], lamk[:, 1:]) * (dy / dx)
    ty = _harmonic(lamk[:-1, :], lamk[1:, :]) * (dx / dy)
    diag = np.zeros((h, w))
    rhs = np.zeros((h, w))
    bx_left = np.zeros(h)
    bx_right = np.zeros(h)
    by_bottom = np.zeros(w)
    by_top = np.zeros(w)

    if bc.p_left is not None:
        bx_left = 2.0 * lamk[:, 0] * dy / dx
        diag[:, 0] += bx_left
        rhs[:, 0] += bx_left * bc.p_left
    if bc.p_right is not None:
        bx_right = 2.0 * lamk[:, -1] * dy / dx
        diag[:, -1] += bx_right
        rhs[:, -1] += bx_right * bc.p_right
    if bc.p_bottom is not None:  # y = 0 side (row 0)
        by_bottom = 2.0 * lamk[0, :] * dx / dy
        diag[0, :] += by_bottom
        rhs[0, :] += by_bottom * bc.p_bottom
    if bc.p_top is not None:  # y = 1 side (row -1)
        by_top = 2.0 * lamk[-1, :] * dx / dy
        diag[-1, :] += by_top
        rhs[-1, :] += by_top * bc.p_top
    return FaceSystem(tx, ty, diag, rhs, bx_left, bx_right, by_bottom, by_top)


def _gradient_face_flux(
    cell_field: np.ndarray, sys: FaceSystem, grid: Grid2D, bc: BoundaryConditions
) -> tuple[np.ndarray, np.ndarray]:
    """Face velocities of -coeff * grad(field) for the system's coefficients.

    Returns (vx (h, w+1), vy (h+1, w)); positive along +x / +y. Dirichlet
    boundary faces use the half-cell transmissibility against the BC value;
    no-flow faces carry zero.
    """
    h, w = grid.shape
    p = cell_field
    vx = np.zeros((h, w + 1))
    vy = np.zeros((h + 1, w))
    vx[:, 1:-1] = sys.tx * (p[:, :-1] - p[:, 1:]) / grid.dy
    vy[1:-1, :] = sys.ty * (p[:-1, :] - p[1:, :]) / grid.dx
    if bc.p_left is not None:
        vx[:, 0] = sys.bx_left * (bc.p_left - p[:, 0]) / grid.dy
    if bc.p_right is not None:
        vx[:, -1] = sys.bx_right * (p[:, -1] - bc.p_right) / grid.dy
    if bc.p_bottom is not None:
        vy[0, :] = sys.by_bottom * (bc.p_bottom - p[0, :]) / grid.dx
    if bc.p_top is not None:
        vy[-1, :] = sys.by_top * (p[-1, :] - bc.p_top) / grid.dx
    return vx, vy


def capillary_contribution(
    s_w: np.ndarray, k: np.ndarray, params: TwoPhaseParams, grid: Grid2D
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Explicit capillary term: RHS (volume units) and capillary face velocities.

    Implements div(lam_n K grad P_c(S_w)) with the previous-step saturation.
    Capillary fluxes vanish at domain boundaries (zero-gradient closure).
    Returns (rhs, wx, wy) with w = -lam_n K grad P_c so that v_T includes w.
    """
    h, w = grid.shape
    if params.p_entry == 0.0:
        return np.zeros((h, w)), np.zeros((h, w + 1)), np.zeros((h + 1, w))
    rp = brooks_corey(s_w, params)
    lam_n_k = np.maximum(rp.k_rn / params.mu_n, _LAMBDA_FLOOR) * k
    pc = capillary_pressure(s_w, params)
    closed = BoundaryConditions(None, None, None, None)
    sys_n = face_coefficients(lam_n_k, grid, closed)
    wx, wy = _gradient_face_flux(pc, sys_n, grid, closed)
    # div(lam_n K grad P_c) * vol = -div(w) * vol
    div_w = (wx[:, 1:] - wx[:, :-1]) * grid.dy + (wy[1:, :] - wy[:-1, :]) * grid.dx
    return div_w, wx, wy


@dataclass
class PressureSolution:
    p: np.ndarray
    vx: np.ndarray
    vy: np.ndarray
    cg: CGResult
    system: FaceSystem


def solve_pressure(
    s_w: np.ndarray,
    k: np.ndarray,
    params: TwoPhaseParams,
    grid: Grid2D,
    cg_tol: float = 1e-10,
) -> PressureSolution:
    """Implicit pressure solve in fractional-flow form.

    Solves -div(lam_T K grad p) = q_T - div(lam_n K grad P_c) with the
    capillary term explicit in the previous saturation, then reconstructs
    total face velocities whose discrete divergence matches q_T to solver
    tolerance.
    """
    k = np.asarray(k, dtype=np.float64)
    if (k <= 0).any():
        raise ValueError("permeability must be positive")
    qw, qn = params.sources(grid)
    q_t = qw + qn
    if not params.bc.any_dirichlet:
        total = float(np.sum(q_t)) * grid.cell_volume
        if abs(total) > 1e-10 * max(np.abs(q_t).max() * grid.cell_volume, 1e-30):
            raise ValueError(
                "all-no-flow boundaries need balanced sources (sum q_T = 0)"
            )

    rp = brooks_corey(s_w, params)
    lamk = rp.lam_total * k
    sys = face_coefficients(lamk, grid, params.bc)
    cap_rhs, wx, wy = capillary_contribution(s_w, k, params, grid)
    b = q_t * grid.cell_volume + sys.rhs_bc - cap_rhs

    p, cg = sparse_solve_spd(sys.operator(), b, tol=cg_tol)
    vx, vy = _gradient_face_flux(p, sys, grid, params.bc)
    return PressureSolution(p, vx + wx, vy + wy, cg, sys)


def face_divergence(vx: np.ndarray, vy: np.ndarray, grid: Grid2D) -> np.ndarray:
    """Discrete divergence of face velocities, per unit volume."""
    return (vx[:, 1:] - vx[:, :-1]) / grid.dx + (vy[1:, :] - vy[:-1, :]) / grid.dy


# ---------------------------------------------------------------------------
# IMPES step
# ---------------------------------------------------------------------------


@dataclass
class TwoPhaseState:
    p: np.ndarray
    s: np.ndarray


@dataclass
class StepDiagnostics:
    cg: CGResult
    dt_admissible: float
    clamp_mass: float
    mass_balance_residual: float


def _max_fw_slope(params: TwoPhaseParams) -> float:
    s = np.linspace(params.s_wr, params.s_max, 2049)
    f = brooks_corey(s, params).f_w
    return float(np.abs(np.diff(f) / np.diff(s)).max())


def admissible_dt(vx: np.ndarray, vy: np.ndarray, params: TwoPhaseParams, grid: Grid2D) -> float:
    """CFL bound dt <= 0.5 phi dx / max |f_w' v_T| for the upwind update."""
    vmax = max(float(np.abs(vx).max()), float(np.abs(vy).max()))
    slope = _max_fw_slope(params)
    if vmax * slope == 0.0:
        return float("inf")
    return 0.5 * params.porosity * min(grid.dx, grid.dy) / (slope * vmax)


def _upwind_face_values(
    cell: np.ndarray, vx: np.ndarray, vy: np.ndarray, inflow_value: float
) -> tuple[np.ndarray, np.ndarray]:
    """Upwind cell values at faces; Dirichlet inflow carries ``inflow_value``."""
    h, w = cell.shape
    fx = np.empty_like(vx)
    fx[:, 1:-1] = np.where(vx[:, 1:-1] > 0, cell[:, :-1], cell[:, 1:])
    fx[:, 0] = np.where(vx[:, 0] > 0, inflow_value, cell[:, 0])
    fx[:, -1] = np.where(vx[:, -1] > 0, cell[:, -1], inflow_value)
    fy = np.empty_like(vy)
    fy[1:-1, :] = np.where(vy[1:-1, :] > 0, cell[:-1, :], cell[1:, :])
    fy[0, :] = np.where(vy[0, :] > 0, inflow_value, cell[0, :])
    fy[-1, :] = np.where(vy[-1, :] > 0, cell[-1, :], inflow_value)
    return fx, fy


def impes_step(
    state: TwoPhaseState,
    k: np.ndarray,
    params: TwoPhaseParams,
    grid: Grid2D,
    cg_tol: float = 1e-10,
) -> tuple[TwoPhaseState, StepDiagnostics]:
    """One IMPES step: implicit pressure, explicit upwind saturation.

    Raises CflError (naming the admissible dt) when grid.dt violates the
    stability bound. Saturation is clamped back to the mobile range after the
    update and the clamped mass is reported, never silently discarded.
    """
    sol = solve_pressure(state.s, k, params, grid, cg_tol=cg_tol)
    dt_max = admissible_dt(sol.vx, sol.vy, params, grid)
    if grid.dt > dt_max * (1 + 1e-12):
        raise CflError(
            f"dt={grid.dt:.6g} violates the transport CFL bound; admissible dt <= {dt_max:.6g}"
        )

    rp = brooks_corey(state.s, params)
    fw_cells = rp.f_w
    fw_in = brooks_corey(np.array(params.inflow_saturation()), params).f_w
    fx, fy = _upwind_face_values(fw_cells, sol.vx, sol.vy, float(fw_in))
    div_fw = face_divergence(fx * sol.vx, fy * sol.vy, grid)

    qw, _ = params.sources(grid)
    s_pre = state.s + (grid.dt / params.porosity) * (qw - div_fw)
    s_new = np.clip(s_pre, params.s_wr, params.s_max)
    clamp_mass = float(
        np.sum(np.abs(s_new - s_pre)) * params.porosity * grid.cell_volume
    )

    # pre-clamp discrete mass balance: phi dS - dt (q_w - div F) == 0 exactly
    balance = params.porosity * (s_pre - state.s) - grid.dt * (qw - div_fw)
    diag = StepDiagnostics(
        cg=sol.cg,
        dt_admissible=dt_max,
        clamp_mass=clamp_mass,
        mass_balance_residual=float(np.abs(balance).max()),
    )
    return TwoPhaseState(p=sol.p, s=s_new), diag


# ---------------------------------------------------------------------------
# Advection-diffusion-reaction step
# ---------------------------------------------------------------------------


def _advect(c: np.ndarray, params: ADRParams, grid: Grid2D) -> np.ndarray:
    fx, fy = _upwind_face_values(c, params.vx, params.vy, 0.0)
    return c - grid.dt * face_divergence(fx * params.vx, fy * params.vy, grid)


def _diffuse(c: np.ndarray, d: float, grid: Grid2D) -> np.ndarray:
    if d == 0.0:
        return c
    gx = d * (c[:, 1:] - c[:, :-1]) / grid.dx  # interior x-face fluxes, no-flux edges
    gy = d * (c[1:, :] - c[:-1, :]) / grid.dy
    out = c.copy()
    out[:, :-1] += grid.dt * gx / grid.dx
    out[:, 1:] -= grid.dt * gx / grid.dx
    out[:-1, :] += grid.dt * gy / grid.dy
    out[1:, :] -= grid.dt * gy / grid.dy
    return out


def reaction_substep(
    c1: np.ndarray, c2: np.ndarray, k_r: float, dt: float
) -> tuple[np.ndarray, np.ndarray]:
    """Exact integration of c1' = -k c1 c2, c2' = +k c1 c2 over dt.

    The pair total s = c1 + c2 is a per-cell invariant of the flow; the
    closed form preserves it to rounding by construction.
    """
    if k_r == 0.0 or dt == 0.0:
        return c1.copy(), c2.copy()
    s = c1 + c2
    decay = np.exp(-k_r * s * dt)
    denom = c2 + c1 * decay
    safe = denom > 1e-300
    c1_new = np.where(safe, s * c1 * decay / np.where(safe, denom, 1.0), c1)
    c2_new = np.where(safe, s * c2 / np.where(safe, denom, 1.0), c2)
    return c1_new, c2_new


def adr_step(conc: np.ndarray, params: ADRParams, grid: Grid2D) -> np.ndarray:
    """One Lie-Trotter step: upwind advection, explicit diffusion, reaction.

    The pressure sub-operator is omitted here because the velocity field is
    prescribed (or precomputed from a steady Darcy solve).
    """
    conc = np.asarray(conc, dtype=np.float64)
    n_c = conc.shape[0]
    if n_c != len(params.nu):
        raise ValueError("species count does not match stoichiometry")

    vmax_x = float(np.abs(params.vx).max())
    vmax_y = float(np.abs(params.vy).max())
    speed = vmax_x / grid.dx + vmax_y / grid.dy
    if speed > 0 and grid.dt > (1.0 / speed) * (1 + 1e-12):
        raise CflError(
            f"dt={grid.dt:.6g} violates the advective CFL bound; admissible dt <= {1.0 / speed:.6g}"
        )
    d_max = float(params.d_coeffs.max())
    if d_max > 0:
        dt_diff = 0.25 * min(grid.dx, grid.dy) ** 2 / d_max
        if grid.dt > dt_diff * (1 + 1e-12):
            raise CflError(
                f"dt={grid.dt:.6g} violates the diffusive stability bound; admissible dt <= {dt_diff:.6g}"
            )

    out = np.empty_like(conc)
    for i in range(n_c):
        ci = _advect(conc[i], params, grid)
        out[i] = _diffuse(ci, float(params.d_coeffs[i]), grid)
    if n_c >= 2 and params.k_r != 0.0:
        out[0], out[1] = reaction_substep(out[0], out[1], params.k_r, grid.dt)
    return out


# ---------------------------------------------------------------------------
# Trajectory generation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Darcy1Gen:
    """Steady single-phase benchmark: log-permeability in, pressure out."""

    corr_len: float = 0.1
    sigma_logk: float = 1.0
    two_level: bool = False
    p_left: float = 1.0
    p_right: float = 0.0


@dataclass(frozen=True)
class TwoPhaseGen:
    corr_len: float = 0.1
    sigma_logk: float = 1.0
    fluid: TwoPhaseParams = field(
        default_factory=lambda: TwoPhaseParams(
            bc=BoundaryConditions(p_left=1.0, p_right=0.0)
        )
    )


@dataclass(frozen=True)
class AdrGen:
    """Reactive transport driven by a steady Darcy velocity field.

    The Darcy velocity is rescaled to unit mean face speed; under the mapping
    Pe = |v| L / D and Da = k L / |v| with L = 1 and |v| = 1, this makes
    D = 1/Pe and k = Da.
    """

    corr_len: float = 0.1
    sigma_logk: float = 1.0
    pe: float = 1.0
    da: float = 0.1
    p_left: float = 1.0
    p_right: float = 0.0


def _single_phase_params(p_left: float, p_right: float) -> TwoPhaseParams:
    # wetting phase only: S fixed at the mobile maximum makes lam_T = 1/mu_w
    return TwoPhaseParams(
        mu_w=1.0,
        mu_n=1.0,
        s_wr=0.0,
        s_nr=0.0,
        bc=BoundaryConditions(p_left=p_left, p_right=p_right),
    )


def _smooth_unit_field(grid: Grid2D, rng: SeededRng, corr_len: float = 0.2) -> np.ndarray:
    """Smooth random field mapped into (0, 1) for initial concentrations."""
    g = generate_grf(grid, corr_len, rng)
    return 1.0 / (1.0 + np.exp(-1.5 * g))


def _permeability(grid: Grid2D, rng: SeededRng, corr_len, sigma_logk, two_level=False):
    g = generate_grf(grid, corr_len, rng)
    if two_level:
        return threshold_permeability(g)
    return permeability_from_grf(g, sigma_logk)


def _subcycle(dt_target: float, dt_max: float) -> tuple[int, float]:
    n = max(1, int(np.ceil(dt_target / dt_max)))
    return n, dt_target / n


def generate_trajectory(
    system: str,
    grid: Grid2D,
    gen,
    t_steps: int,
    rng: SeededRng,
    record_substeps: bool = False,
) -> Trajectory:
    """Generate one trajectory with the oracle solver for ``system``.

    Deterministic per rng (seed, stream); the trajectory records the stream id
    as its seed. When ``record_substeps`` is set, the state after each
    sub-operator application is interleaved into the snapshot sequence
    (these intermediates populate the unlabeled pool).
    """
    if system == "darcy1":
        return _generate_darcy1(grid, gen, rng)
    if system == "twophase":
        return _generate_twophase(grid, gen, t_steps, rng, record_substeps)
    if system == "adr":
        return _generate_adr(grid, gen, t_steps, rng, record_substeps)
    raise ValueError(f"unknown system {system!r}")


def _check_cg(cg: CGResult) -> None:
    if not cg.converged:
        raise NonConvergenceError(
            f"pressure solve stalled at relative residual {cg.relative_residual:.3e}"
        )


def _generate_darcy1(grid: Grid2D, gen: Darcy1Gen, rng: SeededRng) -> Trajectory:
    k, logk = _permeability(grid, rng, gen.corr_len, gen.sigma_logk, gen.two_level)
    params = _single_phase_params(gen.p_left, gen.p_right)
    s = np.full(grid.shape, params.s_max)
    sol = solve_pressure(s, k, params, grid)
    _check_cg(sol.cg)
    channels = (CH_PRESSURE, CH_LOG_PERM)
    zero = np.zeros(grid.shape, dtype=np.float32)
    snap0 = FieldSnapshot(channels, np.stack([zero, logk.astype(np.float32)]))
    snap1 = FieldSnapshot(
        channels, np.stack([sol.p.astype(np.float32), logk.astype(np.float32)])
    )
    static = {
        "p_left": gen.p_left,
        "p_right": gen.p_right,
        "porosity": params.porosity,
    }
    return Trajectory(grid, rng.stream, [snap0, snap1], static_params=static)


def _twophase_snapshot(p, s, logk) -> FieldSnapshot:
    return FieldSnapshot(
        (CH_PRESSURE, CH_SATURATION, CH_LOG_PERM),
        np.stack([p, s, logk]).astype(np.float32),
    )


def _generate_twophase(
    grid: Grid2D, gen: TwoPhaseGen, t_steps: int, rng: SeededRng, record_substeps: bool
) -> Trajectory:
    k, logk = _permeability(grid, rng, gen.corr_len, gen.sigma_logk)
    fluid = gen.fluid
    s = np.full(grid.shape, fluid.s_wr)
    sol0 = solve_pressure(s, k, fluid, grid)
    _check_cg(sol0.cg)
    state = TwoPhaseState(p=sol0.p, s=s)
    snaps = [_twophase_snapshot(state.p, state.s, logk)]

    for _ in range(t_steps):
        sol = solve_pressure(state.s, k, fluid, grid)
        _check_cg(sol.cg)
        dt_max = admissible_dt(sol.vx, sol.vy, fluid, grid)
        # 0.9 margin: velocities can grow between subcycles as the front moves
        n_sub, dt_sub = _subcycle(grid.dt, 0.9 * dt_max)
        sub_grid = Grid2D(grid.h, grid.w, dt=dt_sub)
        s_macro_start = state.s
        for i in range(n_sub):
            state, diag = impes_step(state, k, fluid, sub_grid)
            _check_cg(diag.cg)
            if record_substeps and i == 0:
                # state after the pressure sub-operator, before transport
                snaps.append(_twophase_snapshot(state.p, s_macro_start, logk))
        snaps.append(_twophase_snapshot(state.p, state.s, logk))

    static = {
        "porosity": fluid.porosity,
        "mu_w": fluid.mu_w,
        "mu_n": fluid.mu_n,
        "lam": fluid.lam,
        "s_wr": fluid.s_wr,
        "s_nr": fluid.s_nr,
        "p_entry": fluid.p_entry,
        "p_left": fluid.bc.p_left if fluid.bc.p_left is not None else float("nan"),
        "p_right": fluid.bc.p_right if fluid.bc.p_right is not None else float("nan"),
        "s_inflow": fluid.inflow_saturation(),
    }
    return Trajectory(
        grid,
        rng.stream,
        snaps,
        static_params=static,
        substeps=2 if record_substeps else 1,
    )


def _generate_adr(
    grid: Grid2D, gen: AdrGen, t_steps: int, rng: SeededRng, record_substeps: bool
) -> Trajectory:
    k, logk = _permeability(grid, rng, gen.corr_len, gen.sigma_logk)
    params1 = _single_phase_params(gen.p_left, gen.p_right)
    s = np.full(grid.shape, params1.s_max)
    sol = solve_pressure(s, k, params1, grid)
    _check_cg(sol.cg)

    speed = 0.5 * (float(np.abs(sol.vx).mean()) + float(np.abs(sol.vy).mean()))
    if speed <= 0:
        raise ValueError("degenerate Darcy velocity field")
    vx, vy = sol.vx / speed, sol.vy / speed
    d = 1.0 / gen.pe
    k_r = gen.da
    adr = ADRParams(vx=vx, vy=vy, d_coeffs=np.array([d, d]), k_r=k_r, pe=gen.pe, da=gen.da)

    c1 = _smooth_unit_field(grid, rng.spawn(1))
    c2 = _smooth_unit_field(grid, rng.spawn(2))
    conc = np.stack([c1, c2])

    channels = (CH_PRESSURE, conc_channel(1), conc_channel(2), CH_LOG_PERM)

    def snap(c):
        return FieldSnapshot(
            channels, np.stack([sol.p, c[0], c[1], logk]).astype(np.float32)
        )

    snaps = [snap(conc)]
    dt_adv = 1.0 / (np.abs(vx).max() / grid.dx + np.abs(vy).max() / grid.dy)
    dt_diff = 0.25 * min(grid.dx, grid.dy) ** 2 / d if d > 0 else float("inf")
    n_sub, dt_sub = _subcycle(grid.dt, min(dt_adv, dt_diff))
    sub_grid = Grid2D(grid.h, grid.w, dt=dt_sub)

    for _ in range(t_steps):
        for i in range(n_sub):
            if record_substeps and i == 0:
                # transport applied, reaction pending
                pre = np.stack(
                    [
                        _diffuse(_advect(conc[j], adr, sub_grid), float(d), sub_grid)
                        for j in range(2)
                    ]
                )
                snaps.append(snap(pre))
            conc = adr_step(conc, adr, sub_grid)
        snaps.append(snap(conc))

    static = {
        "porosity": params1.porosity,
        "pe": gen.pe,
        "da": gen.da,
        "d_coeff": d,
        "k_r": k_r,
        "p_left": gen.p_left,
        "p_right": gen.p_right,
    }
    return Trajectory(
        grid,
        rng.stream,
        snaps,
        static_params=static,
        substeps=2 if record_substeps else 1,
    )
