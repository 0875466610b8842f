import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pijepa.numerics import (
    CGResult,
    FivePointOp,
    Grid2D,
    SeededRng,
    fd_div,
    fd_grad,
    fd_lap,
    fft2,
    ifft2,
    sparse_solve_spd,
)


# ---------------------------------------------------------------------------
# Grid / RNG
# ---------------------------------------------------------------------------


def test_grid_spacing_tied_to_counts():
    g = Grid2D(8, 16, dt=0.5)
    assert g.dx == 1.0 / 16 and g.dy == 1.0 / 8
    assert g.cell_volume == pytest.approx(1.0 / 128)


@pytest.mark.parametrize("h,w,dt", [(3, 8, 0.1), (8, 2, 0.1), (8, 8, 0.0)])
def test_grid_rejects_bad_dims(h, w, dt):
    with pytest.raises(ValueError):
        Grid2D(h, w, dt)


def test_rng_identical_streams_identical_bytes():
    a = SeededRng(1234, stream=5).gen.standard_normal(64)
    b = SeededRng(1234, stream=5).gen.standard_normal(64)
    assert np.array_equal(a, b)


def test_rng_streams_differ():
    a = SeededRng(1234, stream=0).gen.standard_normal(64)
    b = SeededRng(1234, stream=1).gen.standard_normal(64)
    assert not np.array_equal(a, b)


def test_rng_derive_int_stable_and_stream_free():
    r = SeededRng(7, 3)
    x = r.derive_int(2)
    r.gen.standard_normal(10)  # consuming the stream must not matter
    assert r.derive_int(2) == x
    assert SeededRng(7, 3).derive_int(2) == x
    assert r.derive_int(3) != x


# ---------------------------------------------------------------------------
# FFT
# ---------------------------------------------------------------------------


def test_fft2_constant_field_dc_only():
    c = 2.5
    x = np.full((8, 16), c)
    spec = fft2(x)
    assert spec[0, 0] == pytest.approx(c * 8 * 16)
    spec[0, 0] = 0.0
    assert np.abs(spec).max() < 1e-9


def test_fft2_round_trip_seeded_16x16():
    x = SeededRng(42).gen.standard_normal((16, 16))
    err = np.abs(ifft2(fft2(x)).real - x).max()
    assert err < 1e-6


def test_fft2_parseval_seeded_8x8():
    x = SeededRng(9).gen.standard_normal((8, 8))
    spec = fft2(x)
    # direct-summation oracle for both sides
    lhs = float(np.sum(x * x))
    rhs = float(np.sum(np.abs(spec) ** 2)) / (8 * 8)
    assert lhs == pytest.approx(rhs, rel=1e-12)


def test_fft2_rejects_non_power_of_two():
    with pytest.raises(ValueError, match="powers of two"):
        fft2(np.zeros((12, 16)))
    with pytest.raises(ValueError, match="powers of two"):
        ifft2(np.zeros((16, 12), dtype=complex))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31), st.floats(-3, 3), st.floats(-3, 3))
def test_fft2_linearity(seed, a, b):
    rng = SeededRng(seed)
    x = rng.gen.standard_normal((8, 8))
    y = rng.gen.standard_normal((8, 8))
    lhs = fft2(a * x + b * y)
    rhs = a * fft2(x) + b * fft2(y)
    scale = max(np.abs(rhs).max(), 1.0)
    assert np.abs(lhs - rhs).max() / scale < 1e-6


# ---------------------------------------------------------------------------
# Finite differences
# ---------------------------------------------------------------------------


def test_fd_grad_linear_field():
    g = Grid2D(16, 16)
    x, y = g.cell_centers()
    fx, fy = fd_grad(x, g)
    assert np.abs(fx - 1.0).max() < 1e-12
    assert np.abs(fy).max() < 1e-12


def test_fd_lap_quadratic_is_four():
    g = Grid2D(16, 16)
    x, y = g.cell_centers()
    f = x**2 + y**2
    lap = fd_lap(f, g)
    interior = lap[1:-1, 1:-1]
    assert np.abs(interior - 4.0).max() < 1e-8


def test_fd_div_constant_vector_field():
    g = Grid2D(8, 8)
    d = fd_div(np.full(g.shape, 3.0), np.full(g.shape, -2.0), g)
    assert np.abs(d).max() < 1e-12


def test_fd_lap_equals_div_grad_interior():
    g = Grid2D(16, 32)
    f = SeededRng(3).gen.standard_normal(g.shape)
    gx, gy = fd_grad(f, g)
    composed = fd_div(gx, gy, g)
    assert np.abs(fd_lap(f, g) - composed)[1:-1, 1:-1].max() < 1e-10


# ---------------------------------------------------------------------------
# CG on the 5-point stencil
# ---------------------------------------------------------------------------


def _poisson_dirichlet0(grid: Grid2D) -> FivePointOp:
    """-lap with homogeneous Dirichlet on all sides, FV form (volume-scaled)."""
    h, w = grid.shape
    dx, dy = grid.dx, grid.dy
    tx = np.full((h, w - 1), dy / dx)
    ty = np.full((h - 1, w), dx / dy)
    diag = np.zeros((h, w))
    diag[:, 0] += 2 * dy / dx
    diag[:, -1] += 2 * dy / dx
    diag[0, :] += 2 * dx / dy
    diag[-1, :] += 2 * dx / dy
    return FivePointOp(tx=tx, ty=ty, diag=diag)


def _manufactured_error(n: int) -> float:
    grid = Grid2D(n, n)
    x, y = grid.cell_centers()
    p_exact = np.sin(np.pi * x) * np.sin(np.pi * y)
    f = 2 * np.pi**2 * p_exact
    op = _poisson_dirichlet0(grid)
    b = f * grid.cell_volume
    p, res = sparse_solve_spd(op, b)
    assert res.converged
    return float(np.linalg.norm(p - p_exact) / np.linalg.norm(p_exact))


def test_cg_identity_operator():
    grid = Grid2D(8, 8)
    b = SeededRng(11).gen.standard_normal(grid.shape)
    x, res = sparse_solve_spd(FivePointOp.identity(grid), b)
    assert res.converged
    assert np.abs(x - b).max() < 1e-9


def test_cg_zero_rhs():
    grid = Grid2D(8, 8)
    x, res = sparse_solve_spd(_poisson_dirichlet0(grid), np.zeros(grid.shape))
    assert res == CGResult(True, 0, 0.0)
    assert not x.any()


def test_cg_manufactured_solution_second_order():
    e16 = _manufactured_error(16)
    e32 = _manufactured_error(32)
    ratio = e16 / e32
    assert 3.0 < ratio < 5.0


def test_cg_iteration_cap_flags_nonconvergence():
    grid = Grid2D(16, 16)
    op = _poisson_dirichlet0(grid)
    b = SeededRng(0).gen.standard_normal(grid.shape)
    x, res = sparse_solve_spd(op, b, max_iter=2)
    assert not res.converged
    assert res.iterations == 2
    assert res.relative_residual > 1e-10
    assert np.isfinite(x).all()


def test_cg_relative_residual_meets_tolerance():
    grid = Grid2D(16, 16)
    op = _poisson_dirichlet0(grid)
    b = SeededRng(1).gen.standard_normal(grid.shape) * grid.cell_volume
    x, res = sparse_solve_spd(op, b)
    assert res.converged
    r = b - op.matvec(x)
    assert np.linalg.norm(r) / np.linalg.norm(b) <= 1e-10
