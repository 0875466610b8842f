import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pijepa.fields import (
    CH_LOG_PERM,
    CH_PRESSURE,
    CH_SATURATION,
    DatasetSplit,
    FieldSnapshot,
    NormStats,
    Trajectory,
    denormalize,
    generate_grf,
    normalize,
    permeability_from_grf,
    threshold_permeability,
)
from pijepa.numerics import Grid2D, SeededRng


def _snap(rng, channels=(CH_PRESSURE, CH_LOG_PERM), h=8, w=8):
    return FieldSnapshot(channels, rng.gen.standard_normal((len(channels), h, w)))


# ---------------------------------------------------------------------------
# Containers
# ---------------------------------------------------------------------------


def test_snapshot_rejects_nan_and_bad_saturation():
    data = np.zeros((1, 8, 8), dtype=np.float32)
    data[0, 0, 0] = np.nan
    with pytest.raises(ValueError, match="NaN"):
        FieldSnapshot((CH_PRESSURE,), data)
    bad_s = np.full((1, 8, 8), 1.5, dtype=np.float32)
    with pytest.raises(ValueError, match="saturation"):
        FieldSnapshot((CH_SATURATION,), bad_s)


def test_snapshot_duplicate_channels_rejected():
    with pytest.raises(ValueError, match="duplicate"):
        FieldSnapshot((CH_PRESSURE, CH_PRESSURE), np.zeros((2, 8, 8)))


def test_trajectory_requires_consistent_snapshots():
    g = Grid2D(8, 8)
    rng = SeededRng(0)
    with pytest.raises(ValueError, match="at least"):
        Trajectory(g, 0, [_snap(rng)])
    with pytest.raises(ValueError, match="share"):
        Trajectory(g, 0, [_snap(rng), _snap(rng, channels=(CH_PRESSURE,))])


def test_dataset_split_pools_disjoint_by_seed():
    g = Grid2D(8, 8)
    rng = SeededRng(0)
    t0 = Trajectory(g, 0, [_snap(rng), _snap(rng)])
    t1 = Trajectory(g, 0, [_snap(rng), _snap(rng)])
    with pytest.raises(ValueError, match="two pools"):
        DatasetSplit(unlabeled=[t0], labeled=[t1], test=[])


# ---------------------------------------------------------------------------
# GRF
# ---------------------------------------------------------------------------


def test_grf_deterministic_per_seed():
    g = Grid2D(32, 32)
    a = generate_grf(g, 0.1, SeededRng(7, 3))
    b = generate_grf(g, 0.1, SeededRng(7, 3))
    assert np.array_equal(a, b)


def test_grf_monte_carlo_moments():
    # 1000 samples at 32x32: grand mean and variance of all values
    g = Grid2D(32, 32)
    fields = np.stack([generate_grf(g, 0.1, SeededRng(100, i)) for i in range(1000)])
    assert -0.05 < fields.mean() < 0.05
    assert 0.9 < fields.var() < 1.1


def test_grf_autocorrelation_at_correlation_length():
    # Monte Carlo autocorrelation oracle: periodic shift by ~l_c, averaged
    g = Grid2D(32, 32)
    corr_len = 0.1
    lag = round(corr_len / g.dx)  # 3.2 -> 3 cells
    acc = 0.0
    n = 1000
    for i in range(n):
        f = generate_grf(g, corr_len, SeededRng(200, i))
        acc += float(np.mean(f * np.roll(f, lag, axis=1)))
    rho = acc / n
    assert abs(rho - np.exp(-0.5)) < 0.1


def test_grf_rejects_bad_correlation_length():
    g = Grid2D(8, 8)
    for bad in (0.0, 1.0, -0.2):
        with pytest.raises(ValueError):
            generate_grf(g, bad, SeededRng(0))


# ---------------------------------------------------------------------------
# Permeability
# ---------------------------------------------------------------------------


def test_permeability_zero_field_gives_unit_k():
    k, logk = permeability_from_grf(np.zeros((8, 8)))
    assert np.all(k == 1.0)
    assert np.all(logk == 0.0)


def test_permeability_hand_value():
    g = np.zeros((4, 4))
    g[1, 2] = np.log(2.0)
    k, _ = permeability_from_grf(g, sigma_logk=1.0)
    assert k[1, 2] == pytest.approx(2.0)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31))
def test_permeability_strictly_positive(seed):
    grid = Grid2D(8, 8)
    g = generate_grf(grid, 0.2, SeededRng(seed))
    k, _ = permeability_from_grf(g, sigma_logk=1.5)
    assert k.min() > 0.0


def test_threshold_permeability_two_levels():
    g = generate_grf(Grid2D(16, 16), 0.2, SeededRng(5))
    k, logk = threshold_permeability(g, 0.1, 1.0)
    assert set(np.unique(k)) == {0.1, 1.0}
    assert np.allclose(np.exp(logk), k)


# ---------------------------------------------------------------------------
# Normalization
# ---------------------------------------------------------------------------


def test_normalize_constant_channel_clamped_to_zero():
    snap = FieldSnapshot((CH_PRESSURE,), np.full((1, 8, 8), 3.0, dtype=np.float32))
    stats = NormStats.from_snapshots([snap])
    out = normalize(snap, stats)
    assert np.abs(out.data).max() == 0.0


def test_normalize_round_trip():
    rng = SeededRng(13)
    snaps = [_snap(rng) for _ in range(6)]
    stats = NormStats.from_snapshots(snaps)
    x = snaps[2]
    back = denormalize(normalize(x, stats), stats)
    assert np.abs(back.data - x.data).max() < 1e-5


def test_normalized_pool_mean_near_zero():
    rng = SeededRng(14)
    snaps = [_snap(rng) for _ in range(32)]
    stats = NormStats.from_snapshots(snaps)
    normed = np.stack([normalize(s, stats).data for s in snaps])
    for c in range(normed.shape[1]):
        assert abs(float(normed[:, c].mean())) < 1e-3


def test_normalize_missing_channel_errors():
    snap = FieldSnapshot((CH_PRESSURE, CH_SATURATION), np.zeros((2, 8, 8)))
    stats = NormStats((CH_PRESSURE,), np.zeros(1), np.ones(1))
    with pytest.raises(ValueError, match="missing"):
        normalize(snap, stats)
