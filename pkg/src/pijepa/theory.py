"""Linear latent-dynamics lab: OLS versus operator-split latent estimation.

Executable counterpart of the sample-complexity analysis: dynamics factor as
A = A_K ... A_1 with each A_k = Phi^T B_k Phi + E_k for an orthonormal-row
encoder Phi. The supervised route regresses the full n x n map; the split
route pretrains latent factors B_k from cheap per-factor pairs and fine-tunes
d x d residuals from labeled pairs, then both are compared by the labeled
sample count needed to reach a target error.
"""
from __future__ import annotations

import csv
import os
from dataclasses import dataclass

import numpy as np

from .numerics import SeededRng
from .svg import Series, line_plot_svg

__all__ = [
    "LinearSystemSpec",
    "LinearSystem",
    "build_system",
    "generate_pairs",
    "generate_factor_pairs",
    "ols_estimate",
    "split_latent_estimate",
    "SplitEstimate",
    "min_labeled_samples",
    "SampleComplexityReport",
    "sample_complexity_experiment",
]


@dataclass(frozen=True)
class LinearSystemSpec:
    n: int = 64
    d: int = 8
    k_factors: int = 2
    deltas: tuple[float, ...] = (0.0, 0.0)  # per-factor projection error ||E_k||_F
    sigma: float = 0.1
    op_norm: float = 0.9  # spectral norm the latent factors are scaled to
    n_unlabeled: int | None = None  # default 50 d^2: pretraining error negligible

    def __post_init__(self) -> None:
        if not (0 < self.d <= self.n):
            raise ValueError("need 0 < d <= n")
        if len(self.deltas) != self.k_factors:
            raise ValueError("one delta per factor")
        if not (0 < self.op_norm <= 1.0):
            raise ValueError("factor operator norm must lie in (0, 1]")

    @property
    def unlabeled_pairs(self) -> int:
        return self.n_unlabeled if self.n_unlabeled is not None else 50 * self.d**2

    @property
    def theoretical_ratio(self) -> float:
        """Parameter-count ratio n^2 / (d^2 K)."""
        return self.n**2 / (self.d**2 * self.k_factors)

    @property
    def finetuned_parameters(self) -> int:
        return self.d**2 * self.k_factors

    @property
    def supervised_parameters(self) -> int:
        return self.n**2


@dataclass
class LinearSystem:
    spec: LinearSystemSpec
    phi: np.ndarray  # (d, n), orthonormal rows
    b_factors: list[np.ndarray]  # (d, d), op norm <= spec.op_norm
    e_terms: list[np.ndarray]  # (n, n), ||E_k||_F == delta_k
    a_factors: list[np.ndarray]
    a: np.ndarray


def build_system(spec: LinearSystemSpec, rng: SeededRng) -> LinearSystem:
    """Phi from QR of a Gaussian matrix; B_k op-norm scaled; E_k Frobenius-scaled."""
    if spec.d == spec.n:
        phi = np.eye(spec.n)
    else:
        q, _ = np.linalg.qr(rng.gen.standard_normal((spec.n, spec.d)))
        phi = q.T
    b_factors, e_terms, a_factors = [], [], []
    for k in range(spec.k_factors):
        b = rng.gen.standard_normal((spec.d, spec.d))
        b *= spec.op_norm / np.linalg.norm(b, 2)
        delta = spec.deltas[k]
        if delta > 0:
            e = rng.gen.standard_normal((spec.n, spec.n))
            e *= delta / np.linalg.norm(e, "fro")
        else:
            e = np.zeros((spec.n, spec.n))
        b_factors.append(b)
        e_terms.append(e)
        a_factors.append(phi.T @ b @ phi + e)
    a = a_factors[0]
    for f in a_factors[1:]:
        a = f @ a
    return LinearSystem(spec, phi, b_factors, e_terms, a_factors, a)


def generate_pairs(
    a: np.ndarray, n_pairs: int, sigma: float, rng: SeededRng
) -> tuple[np.ndarray, np.ndarray]:
    """(x, A x + sigma eps) with isotropic Gaussian inputs."""
    n = a.shape[0]
    x = rng.gen.standard_normal((n_pairs, n))
    y = x @ a.T + sigma * rng.gen.standard_normal((n_pairs, n))
    return x, y


def generate_factor_pairs(
    system: LinearSystem, n_pairs: int, rng: SeededRng
) -> list[tuple[np.ndarray, np.ndarray]]:
    """Per-factor transition pairs (sub-step snapshots of labeled trajectories)."""
    out = []
    state = rng.gen.standard_normal((n_pairs, system.spec.n))
    for a_k in system.a_factors:
        nxt = state @ a_k.T + system.spec.sigma * rng.gen.standard_normal(state.shape)
        out.append((state, nxt))
        state = nxt
    return out


def ols_estimate(
    xs: np.ndarray, ys: np.ndarray, a_true: np.ndarray | None = None
) -> tuple[np.ndarray, float | None]:
    """Least-squares matrix regression (min-norm for underdetermined N < n)."""
    if xs.shape[0] < 1:
        raise ValueError("need at least one transition pair")
    coeffs, *_ = np.linalg.lstsq(xs, ys, rcond=None)
    a_hat = coeffs.T
    err = None if a_true is None else float(np.linalg.norm(a_hat - a_true, "fro"))
    return a_hat, err


@dataclass
class SplitEstimate:
    a_hat: np.ndarray
    error: float
    b_hats: list[np.ndarray]
    delta_hats: list[np.ndarray]
    finetuned_parameters: int


def _latent_regress(xs: np.ndarray, ys: np.ndarray, d: int) -> np.ndarray:
    if xs.shape[0] == 0:
        return np.zeros((d, d))
    coeffs, *_ = np.linalg.lstsq(xs, ys, rcond=None)
    return coeffs.T


def split_latent_estimate(
    system: LinearSystem,
    n_labeled: int,
    rng: SeededRng,
    n_unlabeled: int | None = None,
) -> SplitEstimate:
    """Pretrain latent factors from unlabeled pairs, fine-tune d x d residuals.

    Pretraining regresses B_hat_k in the latent space from ``n_unlabeled``
    per-factor pairs; fine-tuning regresses Delta_k = B_k - B_hat_k from the
    ``n_labeled`` projected pairs. Reconstruction lifts the corrected chain
    back through the encoder: Phi^T (B_K + D_K) ... (B_1 + D_1) Phi.
    """
    spec = system.spec
    phi = system.phi
    n_u = spec.unlabeled_pairs if n_unlabeled is None else n_unlabeled

    b_hats = []
    for a_k in system.a_factors:
        if n_u > 0:
            xs, ys = generate_pairs(a_k, n_u, spec.sigma, rng)
            b_hats.append(_latent_regress(xs @ phi.T, ys @ phi.T, spec.d))
        else:
            b_hats.append(np.zeros((spec.d, spec.d)))

    delta_hats = []
    if n_labeled > 0:
        labeled = generate_factor_pairs(system, n_labeled, rng)
        for (xs, ys), b_hat in zip(labeled, b_hats):
            zx, zy = xs @ phi.T, ys @ phi.T
            delta_hats.append(_latent_regress(zx, zy - zx @ b_hat.T, spec.d))
    else:
        delta_hats = [np.zeros((spec.d, spec.d)) for _ in b_hats]

    latent = np.eye(spec.d)
    for b_hat, d_hat in zip(b_hats, delta_hats):
        latent = (b_hat + d_hat) @ latent
    a_hat = phi.T @ latent @ phi
    err = float(np.linalg.norm(a_hat - system.a, "fro"))
    return SplitEstimate(a_hat, err, b_hats, delta_hats, spec.finetuned_parameters)


# ---------------------------------------------------------------------------
# Sample-complexity measurement
# ---------------------------------------------------------------------------


def _median_relative_error(
    spec: LinearSystemSpec, estimator: str, n_labeled: int, trials: int, seed: int
) -> float:
    errs = []
    for trial in range(trials):
        rng = SeededRng(seed, stream=9_000_000 + 1000 * n_labeled + trial)
        system = build_system(spec, rng)
        scale = float(np.linalg.norm(system.a, "fro"))
        if estimator == "supervised":
            xs, ys = generate_pairs(system.a, n_labeled, spec.sigma, rng)
            _, err = ols_estimate(xs, ys, system.a)
        else:
            err = split_latent_estimate(system, n_labeled, rng).error
        errs.append(err / scale)
    return float(np.median(errs))


def min_labeled_samples(
    spec: LinearSystemSpec,
    estimator: str,
    eps_rel: float,
    trials: int = 20,
    seed: int = 0,
    n_max: int | None = None,
) -> int | None:
    """Bisection for the smallest N with median relative error <= eps_rel."""
    # OLS needs N well past n before the inverse-Wishart noise blowup subsides
    n_max = n_max or 16 * spec.n
    if _median_relative_error(spec, estimator, n_max, trials, seed) > eps_rel:
        return None
    lo, hi = 1, n_max
    while lo < hi:
        mid = (lo + hi) // 2
        if _median_relative_error(spec, estimator, mid, trials, seed) <= eps_rel:
            hi = mid
        else:
            lo = mid + 1
    return lo


@dataclass
class SampleComplexityReport:
    spec: LinearSystemSpec
    eps_rel: float
    n_supervised: int | None
    n_split: int | None
    trials: int

    @property
    def ratio(self) -> float:
        if not self.n_supervised or not self.n_split:
            return float("nan")
        return self.n_supervised / max(self.n_split, 1)


def _one_report(args) -> SampleComplexityReport:
    spec, eps_rel, trials, seed = args
    n_sup = min_labeled_samples(spec, "supervised", eps_rel, trials, seed)
    n_split = min_labeled_samples(spec, "split", eps_rel, trials, seed)
    return SampleComplexityReport(spec, eps_rel, n_sup, n_split, trials)


def sample_complexity_experiment(
    specs: list[LinearSystemSpec],
    eps_rel: float = 0.5,
    trials: int = 20,
    seed: int = 0,
    out_dir: str | None = None,
    jobs: int = 1,
) -> list[SampleComplexityReport]:
    """Measured labeled-sample ratio supervised/split across system sizes.

    Trials are internally seeded per (size, sample count, trial), so parallel
    execution across sizes is bit-reproducible.
    """
    arg_list = [(spec, eps_rel, trials, seed) for spec in specs]
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=jobs) as pool:
            reports = list(pool.map(_one_report, arg_list))
    else:
        reports = [_one_report(a) for a in arg_list]
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "sample_complexity.csv"), "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(
                ["n", "d", "k", "eps_rel", "n_supervised", "n_split", "ratio", "theory_ratio"]
            )
            for r in reports:
                w.writerow(
                    [
                        r.spec.n,
                        r.spec.d,
                        r.spec.k_factors,
                        r.eps_rel,
                        r.n_supervised,
                        r.n_split,
                        f"{r.ratio:.4g}",
                        f"{r.spec.theoretical_ratio:.4g}",
                    ]
                )
        xs = [float(r.spec.n) for r in reports]
        measured = Series("measured ratio", xs, [r.ratio for r in reports])
        theory = Series(
            "parameter ratio", xs, [r.spec.theoretical_ratio for r in reports]
        )
        line_plot_svg(
            os.path.join(out_dir, "sample_complexity.svg"),
            [measured, theory],
            "labeled-sample ratio vs ambient dimension",
            "ambient dimension n",
            "supervised / split sample ratio",
            log_y=True,
        )
    return reports
