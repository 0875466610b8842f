"""Field snapshots, trajectories, Gaussian random fields, and normalization.

Snapshots carry named channels as (C, H, W) float32 arrays; trajectories add
the time axis and per-run static parameters. Permeability is always carried as
a ``log_K`` channel so the dataset file format stays a single dense tensor.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .numerics import Grid2D, SeededRng

__all__ = [
    "CH_PRESSURE",
    "CH_SATURATION",
    "CH_LOG_PERM",
    "conc_channel",
    "FieldSnapshot",
    "Trajectory",
    "DatasetSplit",
    "NormStats",
    "normalize",
    "denormalize",
    "generate_grf",
    "permeability_from_grf",
    "threshold_permeability",
    "LABEL_READS",
]

CH_PRESSURE = "p_w"
CH_SATURATION = "S_w"
CH_LOG_PERM = "log_K"


def conc_channel(i: int) -> str:
    """Name of the i-th species concentration channel (1-based)."""
    return f"c_{i}"


class _LabelReadCounter:
    """Counts reads of labeled final-time outputs.

    The label-free pretraining contract is enforced by checking this counter
    is untouched across the pretraining window.
    """

    def __init__(self) -> None:
        self.value = 0

    def bump(self) -> None:
        self.value += 1

    def reset(self) -> None:
        self.value = 0


LABEL_READS = _LabelReadCounter()


@dataclass
class FieldSnapshot:
    """Multi-channel scalar field on a uniform grid; float32, (C, H, W)."""

    channels: tuple[str, ...]
    data: np.ndarray

    def __post_init__(self) -> None:
        self.channels = tuple(self.channels)
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        if self.data.ndim != 3 or self.data.shape[0] != len(self.channels):
            raise ValueError(
                f"data shape {self.data.shape} inconsistent with {len(self.channels)} channels"
            )
        if len(set(self.channels)) != len(self.channels):
            raise ValueError(f"duplicate channel names in {self.channels}")
        if not np.isfinite(self.data).all():
            raise ValueError("snapshot contains NaN/Inf")
        if CH_SATURATION in self.channels:
            s = self.channel(CH_SATURATION)
            if s.min() < 0.0 or s.max() > 1.0:
                raise ValueError(
                    f"saturation out of [0,1]: [{s.min()}, {s.max()}]"
                )

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    def has_channel(self, name: str) -> bool:
        return name in self.channels

    def channel(self, name: str) -> np.ndarray:
        try:
            return self.data[self.channels.index(name)]
        except ValueError:
            raise ValueError(f"no channel {name!r} in {self.channels}") from None

    def replace_channel(self, name: str, values: np.ndarray) -> "FieldSnapshot":
        out = self.data.copy()
        out[self.channels.index(name)] = values
        return FieldSnapshot(self.channels, out)


@dataclass
class Trajectory:
    """Time-ordered snapshots plus static conditioning parameters.

    ``substeps`` > 1 means intermediate sub-operator states are interleaved in
    ``snapshots`` (``substeps`` entries per macro timestep); full-step pairs
    are then ``substeps`` entries apart.
    """

    grid: Grid2D
    seed: int
    snapshots: list[FieldSnapshot]
    static_params: dict[str, float] = field(default_factory=dict)
    substeps: int = 1

    def __post_init__(self) -> None:
        if len(self.snapshots) < 2:
            raise ValueError("a trajectory needs at least an initial and one later state")
        c0, h0, w0 = self.snapshots[0].shape
        for s in self.snapshots:
            if s.shape != (c0, h0, w0) or s.channels != self.snapshots[0].channels:
                raise ValueError("all snapshots must share channels and shape")
        if (h0, w0) != self.grid.shape:
            raise ValueError(f"snapshots {h0}x{w0} do not match grid {self.grid.shape}")
        if self.substeps < 1:
            raise ValueError("substeps must be >= 1")

    @property
    def channels(self) -> tuple[str, ...]:
        return self.snapshots[0].channels

    @property
    def n_steps(self) -> int:
        return (len(self.snapshots) - 1) // self.substeps

    def initial(self) -> FieldSnapshot:
        return self.snapshots[0]

    def labeled_output(self) -> FieldSnapshot:
        """Final-time output; instrumented for the label-free contract."""
        LABEL_READS.bump()
        return self.snapshots[-1]


@dataclass
class DatasetSplit:
    """Unlabeled/labeled/test pools, disjoint by trajectory seed."""

    unlabeled: list[Trajectory]
    labeled: list[Trajectory]
    test: list[Trajectory]
    meta: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        seen: set[int] = set()
        for pool in (self.unlabeled, self.labeled, self.test):
            for t in pool:
                if t.seed in seen:
                    raise ValueError(f"trajectory seed {t.seed} appears in two pools")
                seen.add(t.seed)

    @property
    def n_u(self) -> int:
        return len(self.unlabeled)

    @property
    def n_l(self) -> int:
        return len(self.labeled)


# ---------------------------------------------------------------------------
# Gaussian random fields and permeability
# ---------------------------------------------------------------------------


def generate_grf(grid: Grid2D, corr_len: float, rng: SeededRng) -> np.ndarray:
    """Stationary Gaussian field with squared-exponential covariance.

    Spectral sampling: a complex white spectrum is shaped by the square root
    of the squared-exponential spectral density exp(-l^2 |k|^2 / 2), inverted,
    and the real part rescaled to zero sample mean and unit sample variance.
    Returns float64 (h, w).
    """
    if not (0.0 < corr_len < 1.0):
        raise ValueError(f"correlation length must be in (0,1), got {corr_len}")
    h, w = grid.shape
    kx = 2.0 * np.pi * np.fft.fftfreq(w, d=grid.dx)
    ky = 2.0 * np.pi * np.fft.fftfreq(h, d=grid.dy)
    k2 = ky[:, None] ** 2 + kx[None, :] ** 2
    amp = np.exp(-(corr_len**2) * k2 / 4.0)
    noise = rng.gen.standard_normal((h, w)) + 1j * rng.gen.standard_normal((h, w))
    f = np.fft.ifft2(noise * amp).real
    f -= f.mean()
    s = f.std()
    if s <= 0.0:
        raise ValueError("degenerate GRF sample (zero variance)")
    return f / s


def permeability_from_grf(
    g: np.ndarray, sigma_logk: float = 1.0
) -> tuple[np.ndarray, np.ndarray]:
    """Lognormal permeability: log K = sigma * g, K = exp(log K) > 0."""
    if sigma_logk <= 0.0:
        raise ValueError(f"sigma_logk must be positive, got {sigma_logk}")
    logk = sigma_logk * np.asarray(g, dtype=np.float64)
    return np.exp(logk), logk


def threshold_permeability(
    g: np.ndarray, k_low: float = 0.1, k_high: float = 1.0
) -> tuple[np.ndarray, np.ndarray]:
    """Two-level permeability: thresholded at the GRF median.

    Mimics piecewise-constant coefficient fields used by Darcy benchmarks.
    """
    if not (0.0 < k_low < k_high):
        raise ValueError("need 0 < k_low < k_high")
    k = np.where(np.asarray(g) >= np.median(g), k_high, k_low).astype(np.float64)
    return k, np.log(k)


# ---------------------------------------------------------------------------
# Normalization
# ---------------------------------------------------------------------------

_STD_FLOOR = 1e-6


@dataclass
class NormStats:
    """Per-channel mean/std over a training pool; std clamped to 1e-6."""

    channels: tuple[str, ...]
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self) -> None:
        self.channels = tuple(self.channels)
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.std = np.maximum(np.asarray(self.std, dtype=np.float64), _STD_FLOOR)

    @classmethod
    def from_snapshots(cls, snapshots: Sequence[FieldSnapshot]) -> "NormStats":
        if not snapshots:
            raise ValueError("cannot compute statistics over an empty pool")
        channels = snapshots[0].channels
        stacked = np.stack([s.data.astype(np.float64) for s in snapshots])
        mean = stacked.mean(axis=(0, 2, 3))
        std = stacked.std(axis=(0, 2, 3))
        return cls(channels, mean, std)

    def index_for(self, name: str) -> int:
        try:
            return self.channels.index(name)
        except ValueError:
            raise ValueError(f"channel {name!r} missing from normalization stats") from None


def _unchecked_snapshot(channels: tuple[str, ...], data: np.ndarray) -> FieldSnapshot:
    """Snapshot without physical-bounds validation (normalized space)."""
    snap = FieldSnapshot.__new__(FieldSnapshot)
    snap.channels = tuple(channels)
    snap.data = np.ascontiguousarray(data, dtype=np.float32)
    return snap


def normalize(snapshot: FieldSnapshot, stats: NormStats) -> FieldSnapshot:
    """Per-channel z-score. Stats must cover every snapshot channel."""
    out = np.empty_like(snapshot.data, dtype=np.float32)
    for i, name in enumerate(snapshot.channels):
        j = stats.index_for(name)
        out[i] = (snapshot.data[i].astype(np.float64) - stats.mean[j]) / stats.std[j]
    # a normalized view may legitimately leave [0,1] on the saturation channel
    return _unchecked_snapshot(snapshot.channels, out)


def denormalize(snapshot: FieldSnapshot, stats: NormStats) -> FieldSnapshot:
    out = np.empty_like(snapshot.data, dtype=np.float32)
    for i, name in enumerate(snapshot.channels):
        j = stats.index_for(name)
        out[i] = snapshot.data[i].astype(np.float64) * stats.std[j] + stats.mean[j]
    return _unchecked_snapshot(snapshot.channels, out)
