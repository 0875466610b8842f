"""Foundational numerics: grids, seeded randomness, FFTs, finite differences, CG.

Everything here is float64 and deterministic; these kernels back the oracle
solvers and the verification side of every dual-route check in the test suite.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "Grid2D",
    "SeededRng",
    "fft2",
    "ifft2",
    "fd_grad",
    "fd_div",
    "fd_lap",
    "FivePointOp",
    "CGResult",
    "sparse_solve_spd",
]


@dataclass(frozen=True)
class Grid2D:
    """Uniform cell-centered grid on the unit square, plus a timestep.

    ``h`` counts cells along y, ``w`` along x; spacings are derived so the
    domain is always [0,1] x [0,1].
    """

    h: int
    w: int
    dt: float = 1e-2

    def __post_init__(self) -> None:
        if self.h < 4 or self.w < 4:
            raise ValueError(f"grid must be at least 4x4, got {self.h}x{self.w}")
        if self.dt <= 0:
            raise ValueError(f"dt must be positive, got {self.dt}")

    @property
    def dx(self) -> float:
        return 1.0 / self.w

    @property
    def dy(self) -> float:
        return 1.0 / self.h

    @property
    def shape(self) -> tuple[int, int]:
        return (self.h, self.w)

    @property
    def cell_volume(self) -> float:
        return self.dx * self.dy

    def cell_centers(self) -> tuple[np.ndarray, np.ndarray]:
        """(x, y) coordinate arrays of shape (h, w)."""
        x = (np.arange(self.w) + 0.5) * self.dx
        y = (np.arange(self.h) + 0.5) * self.dy
        return np.broadcast_to(x, (self.h, self.w)).copy(), np.broadcast_to(
            y[:, None], (self.h, self.w)
        ).copy()


class SeededRng:
    """Counter-based random stream addressed by (seed, stream).

    Identical (seed, stream) pairs produce identical byte sequences on any
    platform (PCG64 through numpy's SeedSequence). Parallel work should split
    by stream id, one stream per trajectory/trial.
    """

    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed)
        self.stream = int(stream)
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=(self.stream,))
        self.gen = np.random.Generator(np.random.PCG64(ss))

    def spawn(self, index: int) -> "SeededRng":
        """Derive an independent child stream without consuming this one."""
        return SeededRng(self.seed, (self.stream + 1) * 1_000_003 + int(index))

    def derive_int(self, tag: int = 0) -> int:
        """Deterministic 63-bit integer keyed by (seed, stream, tag).

        Does not advance the stream; used to seed foreign generators (torch).
        """
        ss = np.random.SeedSequence(
            entropy=self.seed, spawn_key=(self.stream, int(tag))
        )
        return int(ss.generate_state(1, dtype=np.uint64)[0] >> 1)

    def __repr__(self) -> str:  # pragma: no cover
        return f"SeededRng(seed={self.seed}, stream={self.stream})"


def _require_pow2(n: int, name: str) -> None:
    if n < 1 or (n & (n - 1)) != 0:
        raise ValueError(f"{name}={n}: FFT dimensions must be powers of two")


def fft2(field: np.ndarray) -> np.ndarray:
    """Unnormalized forward 2D FFT of a real (or complex) H x W array."""
    a = np.asarray(field)
    if a.ndim != 2:
        raise ValueError(f"expected a 2D array, got shape {a.shape}")
    _require_pow2(a.shape[0], "H")
    _require_pow2(a.shape[1], "W")
    return np.fft.fft2(a)


def ifft2(spectrum: np.ndarray) -> np.ndarray:
    """Inverse of :func:`fft2`; carries the 1/(H*W) normalization."""
    a = np.asarray(spectrum)
    if a.ndim != 2:
        raise ValueError(f"expected a 2D array, got shape {a.shape}")
    _require_pow2(a.shape[0], "H")
    _require_pow2(a.shape[1], "W")
    return np.fft.ifft2(a)


def _diff1(f: np.ndarray, h: float, axis: int) -> np.ndarray:
    """Second-order first derivative: central interior, one-sided boundaries."""
    g = np.moveaxis(np.asarray(f, dtype=np.float64), axis, 0)
    out = np.empty_like(g)
    out[1:-1] = (g[2:] - g[:-2]) / (2.0 * h)
    out[0] = (-3.0 * g[0] + 4.0 * g[1] - g[2]) / (2.0 * h)
    out[-1] = (3.0 * g[-1] - 4.0 * g[-2] + g[-3]) / (2.0 * h)
    return np.moveaxis(out, 0, axis)


def fd_grad(field: np.ndarray, grid: Grid2D) -> tuple[np.ndarray, np.ndarray]:
    """(d/dx, d/dy) of a (h, w) field indexed [y, x]."""
    f = np.asarray(field, dtype=np.float64)
    if f.shape != grid.shape:
        raise ValueError(f"field shape {f.shape} does not match grid {grid.shape}")
    return _diff1(f, grid.dx, axis=1), _diff1(f, grid.dy, axis=0)


def fd_div(vx: np.ndarray, vy: np.ndarray, grid: Grid2D) -> np.ndarray:
    """Divergence of a cell-centered vector field."""
    if np.asarray(vx).shape != grid.shape or np.asarray(vy).shape != grid.shape:
        raise ValueError("vector components must match the grid shape")
    return _diff1(vx, grid.dx, axis=1) + _diff1(vy, grid.dy, axis=0)


def fd_lap(field: np.ndarray, grid: Grid2D) -> np.ndarray:
    """Laplacian as the exact composition div(grad(.)).

    Defined as the composition (rather than a compact stencil) so that
    ``fd_lap(f) == fd_div(*fd_grad(f))`` holds to rounding everywhere.
    """
    gx, gy = fd_grad(field, grid)
    return fd_div(gx, gy, grid)


@dataclass
class FivePointOp:
    """Symmetric 5-point stencil operator in face-transmissibility form.

    ``tx`` (h, w-1) and ``ty`` (h-1, w) are interior-face coefficients;
    ``diag`` (h, w) collects everything that multiplies the cell itself beyond
    its face couplings (Dirichlet half-cell transmissibilities, shifts).
    The operator is SPD whenever tx, ty >= 0 and diag >= 0 with diag > 0
    somewhere (or the system is solved in the consistent all-Neumann sense).
    """

    tx: np.ndarray
    ty: np.ndarray
    diag: np.ndarray

    def __post_init__(self) -> None:
        h, w = self.diag.shape
        if self.tx.shape != (h, w - 1) or self.ty.shape != (h - 1, w):
            raise ValueError("face coefficient shapes inconsistent with diag")

    @property
    def shape(self) -> tuple[int, int]:
        return self.diag.shape

    def matvec(self, p: np.ndarray) -> np.ndarray:
        ap = self.diag * p
        fx = self.tx * (p[:, 1:] - p[:, :-1])
        ap[:, 1:] += fx
        ap[:, :-1] -= fx
        fy = self.ty * (p[1:, :] - p[:-1, :])
        ap[1:, :] += fy
        ap[:-1, :] -= fy
        return ap

    @classmethod
    def identity(cls, grid: Grid2D) -> "FivePointOp":
        h, w = grid.shape
        return cls(
            tx=np.zeros((h, w - 1)), ty=np.zeros((h - 1, w)), diag=np.ones((h, w))
        )


@dataclass(frozen=True)
class CGResult:
    converged: bool
    iterations: int
    relative_residual: float


def sparse_solve_spd(
    op: FivePointOp,
    b: np.ndarray,
    tol: float = 1e-10,
    max_iter: int | None = None,
) -> tuple[np.ndarray, CGResult]:
    """Conjugate gradients on a 5-point SPD operator.

    Stops at relative residual ||Ax-b||/||b|| <= tol or at the iteration cap
    (10*h*w by default), in which case the best iterate is returned together
    with a non-convergence flag; callers decide whether that is fatal.
    """
    b = np.asarray(b, dtype=np.float64)
    if b.shape != op.shape:
        raise ValueError(f"rhs shape {b.shape} does not match operator {op.shape}")
    h, w = b.shape
    if max_iter is None:
        max_iter = 10 * h * w

    norm_b = float(np.linalg.norm(b))
    if norm_b == 0.0:
        return np.zeros_like(b), CGResult(True, 0, 0.0)

    x = np.zeros_like(b)
    r = b.copy()
    d = r.copy()
    rs = float(np.vdot(r, r).real)
    best_x = x.copy()
    best_res = np.sqrt(rs) / norm_b

    for it in range(1, max_iter + 1):
        ad = op.matvec(d)
        dad = float(np.vdot(d, ad).real)
        if dad <= 0.0:
            # numerically lost positive-definiteness; return best iterate
            return best_x, CGResult(False, it, best_res)
        alpha = rs / dad
        x += alpha * d
        r -= alpha * ad
        rs_new = float(np.vdot(r, r).real)
        res = np.sqrt(rs_new) / norm_b
        if res < best_res:
            best_res = res
            best_x = x.copy()
        if res <= tol:
            return x, CGResult(True, it, res)
        d = r + (rs_new / rs) * d
        rs = rs_new

    return best_x, CGResult(False, max_iter, best_res)
