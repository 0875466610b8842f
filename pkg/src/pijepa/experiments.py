"""Data-efficiency sweeps and the ablation matrix.

Each cell is (method, n_labeled, seed) -> relative L2 error; aggregation
reports mean and a 95% Student-t confidence interval over seeds. Sweeps can
fan out over seeds with process-level parallelism.
"""
from __future__ import annotations

import csv
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import stats as sps

from .fields import DatasetSplit
from .models import EncoderConfig, PredictorConfig, StagePredictorBank
from .objectives import AblationFlags, LossWeights
from .svg import Series, line_plot_svg
from .training import TrainConfig, evaluate, finetune, pretrain, train_fno

__all__ = [
    "ExperimentRow",
    "AggregateRow",
    "ExperimentTable",
    "confidence_halfwidth",
    "spearman_rho",
    "SweepConfig",
    "data_efficiency_sweep",
    "AblationConfig",
    "ablate",
    "predictor_parameter_count",
]

METHODS = ("pijepa", "scratch", "fno", "pino")


@dataclass(frozen=True)
class ExperimentRow:
    method: str
    n_labeled: int
    seed: int
    rel_l2: float


@dataclass(frozen=True)
class AggregateRow:
    method: str
    n_labeled: int
    mean: float
    ci_half: float  # NaN when fewer than 2 seeds
    n_seeds: int


def confidence_halfwidth(values: list[float]) -> float:
    """95% Student-t half-width t_{0.975, n-1} * s / sqrt(n); NaN for n < 2."""
    n = len(values)
    if n < 2:
        return float("nan")
    s = float(np.std(values, ddof=1))
    return float(sps.t.ppf(0.975, n - 1) * s / math.sqrt(n))


def spearman_rho(xs: list[float], ys: list[float]) -> float:
    return float(sps.spearmanr(xs, ys).statistic)


@dataclass
class ExperimentTable:
    rows: list[ExperimentRow] = field(default_factory=list)

    def aggregate(self) -> list[AggregateRow]:
        keys = sorted({(r.method, r.n_labeled) for r in self.rows})
        out = []
        for method, n in keys:
            vals = [r.rel_l2 for r in self.rows if (r.method, r.n_labeled) == (method, n)]
            out.append(
                AggregateRow(
                    method, n, float(np.mean(vals)), confidence_halfwidth(vals), len(vals)
                )
            )
        return out

    def write_csv(self, path: str) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["method", "n_labeled", "seed", "rel_l2"])
            for r in self.rows:
                w.writerow([r.method, r.n_labeled, r.seed, repr(r.rel_l2)])

    @classmethod
    def read_csv(cls, path: str) -> "ExperimentTable":
        rows = []
        with open(path, newline="") as f:
            for rec in csv.DictReader(f):
                rows.append(
                    ExperimentRow(
                        rec["method"], int(rec["n_labeled"]), int(rec["seed"]), float(rec["rel_l2"])
                    )
                )
        return cls(rows)

    def spearman_by_method(self) -> dict[str, float]:
        """Rank correlation between n_labeled and mean error, per method."""
        out = {}
        for method in sorted({r.method for r in self.rows}):
            agg = [a for a in self.aggregate() if a.method == method]
            if len(agg) >= 2:
                out[method] = spearman_rho(
                    [a.n_labeled for a in agg], [a.mean for a in agg]
                )
        return out

    def plot(self, path: str, title: str, xlabel: str = "labeled samples") -> None:
        series = []
        for method in sorted({r.method for r in self.rows}):
            agg = [a for a in self.aggregate() if a.method == method]
            agg.sort(key=lambda a: a.n_labeled)
            xs = [a.n_labeled for a in agg]
            ys = [a.mean for a in agg]
            lo = [a.mean - a.ci_half if math.isfinite(a.ci_half) else float("nan") for a in agg]
            hi = [a.mean + a.ci_half if math.isfinite(a.ci_half) else float("nan") for a in agg]
            series.append(Series(method, xs, ys, lo, hi))
        line_plot_svg(path, series, title, xlabel, "relative L2 error", log_x=True)


# ---------------------------------------------------------------------------
# Data-efficiency sweep
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SweepConfig:
    system: str = "darcy1"
    methods: tuple[str, ...] = ("pijepa", "scratch", "fno")
    n_labeled: tuple[int, ...] = (8, 16, 32, 64)
    seeds: tuple[int, ...] = (0, 1, 2)
    jobs: int = 1

    def __post_init__(self) -> None:
        for m in self.methods:
            if m not in METHODS:
                raise ValueError(f"unknown method {m!r}; expected one of {METHODS}")


def _sweep_one_seed(args) -> list[ExperimentRow]:
    (split, sweep, enc_cfg, pred_cfg, weights, base_cfg, seed) = args
    rows: list[ExperimentRow] = []
    cfg = replace(base_cfg, init_seed=seed, data_seed=seed)
    pretrained = None
    if "pijepa" in sweep.methods:
        pretrained = pretrain(
            split.unlabeled, sweep.system, enc_cfg, pred_cfg, weights, cfg
        )
    for n in sweep.n_labeled:
        for method in sweep.methods:
            if method == "pijepa":
                model, _ = finetune(
                    pretrained.model, split.labeled, n, sweep.system, cfg
                )
            elif method == "scratch":
                model, _ = finetune(
                    None, split.labeled, n, sweep.system, cfg, enc_cfg, pred_cfg
                )
            elif method == "fno":
                model, _ = train_fno(split.labeled, n, sweep.system, cfg)
            elif method == "pino":
                model, _ = train_fno(
                    split.labeled, n, sweep.system, cfg, physics_weight=weights.lambda_p
                )
            err = evaluate(model, split.test, sweep.system)
            rows.append(ExperimentRow(method, n, seed, err))
    return rows


def data_efficiency_sweep(
    split: DatasetSplit,
    sweep: SweepConfig,
    enc_cfg: EncoderConfig,
    pred_cfg: PredictorConfig,
    weights: LossWeights,
    train_cfg: TrainConfig,
    out_dir: str | None = None,
) -> ExperimentTable:
    """Full (method x n_labeled x seed) cross product with CSV + SVG output.

    The pretrained checkpoint is built once per seed and shared across the
    pijepa cells of that seed. With ``jobs > 1`` seeds run in parallel
    processes; each cell is internally deterministic from its seed.
    """
    if len(split.labeled) < max(sweep.n_labeled):
        raise ValueError(
            f"labeled pool ({len(split.labeled)}) smaller than max n_labeled"
        )
    arg_list = [
        (split, sweep, enc_cfg, pred_cfg, weights, train_cfg, seed)
        for seed in sweep.seeds
    ]
    table = ExperimentTable()
    if sweep.jobs > 1:
        with ProcessPoolExecutor(max_workers=sweep.jobs) as pool:
            for rows in pool.map(_sweep_one_seed, arg_list):
                table.rows.extend(rows)
    else:
        for args in arg_list:
            table.rows.extend(_sweep_one_seed(args))
    table.rows.sort(key=lambda r: (r.method, r.n_labeled, r.seed))

    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        table.write_csv(os.path.join(out_dir, "sweep.csv"))
        table.plot(
            os.path.join(out_dir, "sweep.svg"),
            f"data efficiency: {sweep.system}",
        )
    return table


# ---------------------------------------------------------------------------
# Ablation matrix
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AblationConfig:
    system: str = "darcy1"
    variants: tuple[str, ...] = AblationFlags.VARIANTS
    n_labeled: int = 32
    seeds: tuple[int, ...] = (0, 1, 2)


def predictor_parameter_count(
    enc_cfg: EncoderConfig, pred_cfg: PredictorConfig
) -> int:
    bank = StagePredictorBank(enc_cfg.d_model, pred_cfg, enc_cfg.token_grid)
    return sum(p.numel() for p in bank.parameters())


def ablate(
    split: DatasetSplit,
    ab: AblationConfig,
    enc_cfg: EncoderConfig,
    pred_cfg: PredictorConfig,
    weights: LossWeights,
    train_cfg: TrainConfig,
    out_dir: str | None = None,
) -> tuple[ExperimentTable, dict[str, float]]:
    """Pretrain + fine-tune each objective variant under identical budgets.

    Returns the per-variant table plus percent deltas against the full model.
    The single-predictor variant uses depth K*depth so its parameter budget
    matches the split bank exactly.
    """
    table = ExperimentTable()
    for variant in ab.variants:
        flags = AblationFlags.from_variant(variant)
        for seed in ab.seeds:
            cfg = replace(train_cfg, init_seed=seed, data_seed=seed)
            result = pretrain(
                split.unlabeled, ab.system, enc_cfg, pred_cfg, weights, cfg, flags
            )
            model, _ = finetune(result.model, split.labeled, ab.n_labeled, ab.system, cfg)
            err = evaluate(model, split.test, ab.system)
            table.rows.append(ExperimentRow(variant, ab.n_labeled, seed, err))

    means = {a.method: a.mean for a in table.aggregate()}
    full = means["full"]
    deltas = {v: 100.0 * (means[v] - full) / full for v in ab.variants}

    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        table.write_csv(os.path.join(out_dir, "ablation.csv"))
        with open(os.path.join(out_dir, "ablation_summary.csv"), "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["variant", "rel_l2_mean", "ci_half", "delta_pct_vs_full"])
            for a in table.aggregate():
                w.writerow(
                    [a.method, f"{a.mean:.6g}", f"{a.ci_half:.6g}", f"{deltas[a.method]:.3f}"]
                )
    return table, deltas
