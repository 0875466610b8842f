"""Batch command-line entry point.

Exit codes: 0 success, 1 usage, 2 config/schema, 3 data/format, 4 numerical
failure. Every run directory receives the resolved config and a CRC manifest
of its artifacts.
"""
from __future__ import annotations

import argparse
import csv
import os
import sys
from dataclasses import replace

from .config import (
    encoder_config_from,
    grid_from,
    load_config,
    loss_weights_from,
    predictor_config_from,
    rollout_config_from,
    train_config_from,
    write_manifest,
)
from .datagen import PoolSizes, make_dataset
from .errors import ConfigError, DataFormatError, NumericalError

__all__ = ["main"]


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage errors exit 1, not argparse's default 2
        print(f"error: {message}", file=sys.stderr)
        self.print_usage(sys.stderr)
        sys.exit(1)


def _build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="pijepa", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a PJF1 dataset with the oracle solvers")
    g.add_argument("--system", choices=["darcy1", "twophase", "adr"], required=True)
    g.add_argument("--n", type=int, required=True, help="total records (70/20/10 split)")
    g.add_argument("--grid", type=int, required=True)
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--config", default=None)
    g.add_argument("--n-unlabeled", type=int, default=None)
    g.add_argument("--n-labeled", type=int, default=None)
    g.add_argument("--n-test", type=int, default=None)

    pt = sub.add_parser("pretrain", help="label-free pretraining on the unlabeled pool")
    pt.add_argument("--config", default=None)
    pt.add_argument("--data", required=True)
    pt.add_argument("--out", required=True, help="checkpoint path (.pjck)")

    ft = sub.add_parser("finetune", help="supervised fine-tuning on N labeled runs")
    ft.add_argument("--config", default=None)
    ft.add_argument("--init", required=True, help="pretrained checkpoint path or 'scratch'")
    ft.add_argument("--n-labeled", type=int, required=True)
    ft.add_argument("--data", required=True)
    ft.add_argument("--out", required=True)

    ev = sub.add_parser("evaluate", help="relative L2 error on the test pool")
    ev.add_argument("--model", required=True)
    ev.add_argument("--data", required=True)
    ev.add_argument("--out-csv", default=None)

    ro = sub.add_parser("rollout", help="closed-loop autoregressive rollout")
    ro.add_argument("--model", required=True)
    ro.add_argument("--data", required=True)
    ro.add_argument("--steps", type=int, required=True)
    ro.add_argument("--out", required=True)
    ro.add_argument("--config", default=None)
    ro.add_argument("--index", type=int, default=0, help="test-pool trajectory index")

    sw = sub.add_parser("sweep", help="data-efficiency sweep (CSV + SVG)")
    sw.add_argument("--config", default=None)
    sw.add_argument("--data", default=None, help="PJF1 path; generated when omitted")
    sw.add_argument("--out-dir", required=True)
    sw.add_argument("--jobs", type=int, default=None)

    ab = sub.add_parser("ablate", help="objective-variant ablation matrix")
    ab.add_argument("--config", default=None)
    ab.add_argument("--data", default=None)
    ab.add_argument("--out-dir", required=True)

    th = sub.add_parser("prop1", help="linear sample-complexity experiment")
    th.add_argument("--config", default=None)
    th.add_argument("--out-dir", required=True)
    th.add_argument("--jobs", type=int, default=1)

    gc = sub.add_parser("grad-check", help="FD gradient verification over the ablation matrix")
    gc.add_argument("--config", default=None)
    return p


def _load_split(path: str):
    from .pjf import load_dataset

    return load_dataset(path)


def _cmd_gen_data(args) -> int:
    cfg = load_config(args.config)
    grid = replace(grid_from(cfg), h=args.grid, w=args.grid)
    if args.n_unlabeled is not None or args.n_labeled is not None or args.n_test is not None:
        sizes = PoolSizes(
            unlabeled=args.n_unlabeled or 1,
            labeled=args.n_labeled or 1,
            test=args.n_test or 1,
        )
    else:
        sizes = PoolSizes.from_total(args.n)
    split = make_dataset(
        args.system,
        grid,
        sizes,
        base_seed=args.seed,
        t_steps=int(cfg["system"]["t_steps"]),
        gen_cfg=cfg["system"],
    )
    from .pjf import save_dataset

    save_dataset(args.out, split)
    print(
        f"wrote {args.out}: system={args.system} grid={args.grid} "
        f"pools=({split.n_u} unlabeled, {split.n_l} labeled, {len(split.test)} test)"
    )
    return 0


def _cmd_pretrain(args) -> int:
    from .modelio import optimizer_tensors, save_jepa
    from .training import pretrain

    cfg = load_config(args.config)
    split = _load_split(args.data)
    system = split.meta.get("system", cfg["system"]["name"])
    channels = split.unlabeled[0].channels
    enc_cfg = encoder_config_from(cfg, len(channels))
    result = pretrain(
        split.unlabeled,
        system,
        enc_cfg,
        predictor_config_from(cfg),
        loss_weights_from(cfg),
        train_config_from(cfg),
        loss_csv=os.path.splitext(args.out)[0] + "_losses.csv",
    )
    save_jepa(
        args.out,
        result.model,
        system,
        step=result.total_steps,
        extra_tensors=result.opt_state,
    )
    out_dir = os.path.dirname(os.path.abspath(args.out)) or "."
    write_manifest(
        out_dir,
        cfg,
        "pretrain",
        [os.path.basename(args.out), os.path.basename(os.path.splitext(args.out)[0] + "_losses.csv")],
    )
    print(
        f"pretrained {result.total_steps} steps; labels read: {result.labels_read}; "
        f"final pred loss {result.losses[-1]['pred']:.5f}; wrote {args.out}"
    )
    return 0


def _cmd_finetune(args) -> int:
    from .modelio import load_model, save_surrogate
    from .training import finetune

    cfg = load_config(args.config)
    split = _load_split(args.data)
    system = split.meta.get("system", cfg["system"]["name"])
    channels = split.labeled[0].channels
    train_cfg = train_config_from(cfg)
    if args.init == "scratch":
        model, curve = finetune(
            None,
            split.labeled,
            args.n_labeled,
            system,
            train_cfg,
            encoder_config_from(cfg, len(channels)),
            predictor_config_from(cfg),
        )
    else:
        jepa, meta = load_model(args.init)
        if meta["kind"] != "jepa":
            raise ConfigError(f"--init expects a pretraining checkpoint, got {meta['kind']}")
        model, curve = finetune(jepa, split.labeled, args.n_labeled, system, train_cfg)
    save_surrogate(args.out, model, system, step=len(curve))
    out_dir = os.path.dirname(os.path.abspath(args.out)) or "."
    write_manifest(out_dir, cfg, "finetune", [os.path.basename(args.out)])
    print(f"fine-tuned on {args.n_labeled} runs; final train rel-L2 {curve[-1]:.5f}; wrote {args.out}")
    return 0


def _cmd_evaluate(args) -> int:
    from .modelio import load_model
    from .training import evaluate

    split = _load_split(args.data)
    model, meta = load_model(args.model)
    system = meta.get("system") or split.meta.get("system")
    err = evaluate(model, split.test, system)
    print(f"{err:.3f}")
    if args.out_csv:
        with open(args.out_csv, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["model", "system", "n_test", "rel_l2"])
            w.writerow([args.model, system, len(split.test), f"{err:.10g}"])
    return 0


def _cmd_rollout(args) -> int:
    from .fields import DatasetSplit, Trajectory
    from .modelio import load_model
    from .pjf import save_dataset
    from .training import rollout

    cfg = load_config(args.config)
    split = _load_split(args.data)
    model, meta = load_model(args.model)
    if meta["kind"] == "fno":
        raise ConfigError("rollout needs a latent model checkpoint, not the FNO baseline")
    jepa = model if meta["kind"] == "jepa" else model.jepa
    system = meta.get("system") or split.meta.get("system")
    source = split.test[args.index]
    result = rollout(jepa, source.initial(), system, rollout_config_from(cfg, args.steps))
    if result.truncated_at is not None:
        print(f"rollout truncated by NaN at step {result.truncated_at}", file=sys.stderr)
        return 4
    traj = Trajectory(
        source.grid, source.seed, result.snapshots, static_params=source.static_params
    )
    save_dataset(
        args.out,
        DatasetSplit(unlabeled=[], labeled=[], test=[traj], meta={"system": system}),
    )
    print(f"rolled out {args.steps} steps; wrote {args.out}")
    return 0


def _cmd_sweep(args) -> int:
    from .experiments import SweepConfig, data_efficiency_sweep

    cfg = load_config(args.config)
    split = _load_split(args.data) if args.data else _generated_split(cfg)
    sw = cfg["sweep"]
    sweep = SweepConfig(
        system=split.meta.get("system", cfg["system"]["name"]),
        methods=tuple(sw["methods"]),
        n_labeled=tuple(int(n) for n in sw["n_labeled"]),
        seeds=tuple(int(s) for s in sw["seeds"]),
        jobs=int(args.jobs if args.jobs is not None else sw["jobs"]),
    )
    channels = split.unlabeled[0].channels
    table = data_efficiency_sweep(
        split,
        sweep,
        encoder_config_from(cfg, len(channels)),
        predictor_config_from(cfg),
        loss_weights_from(cfg),
        train_config_from(cfg),
        out_dir=args.out_dir,
    )
    write_manifest(args.out_dir, cfg, "sweep", ["sweep.csv", "sweep.svg"])
    for method, rho in table.spearman_by_method().items():
        print(f"spearman(n_labeled, mean error) {method}: {rho:+.3f}")
    print(f"wrote {args.out_dir}/sweep.csv and sweep.svg ({len(table.rows)} rows)")
    return 0


def _generated_split(cfg: dict):
    d = cfg["data"]
    sizes = PoolSizes(int(d["n_unlabeled"]), int(d["n_labeled"]), int(d["n_test"]))
    return make_dataset(
        cfg["system"]["name"],
        grid_from(cfg),
        sizes,
        base_seed=int(d["base_seed"]),
        t_steps=int(cfg["system"]["t_steps"]),
        gen_cfg=cfg["system"],
    )


def _cmd_ablate(args) -> int:
    from .experiments import AblationConfig, ablate

    cfg = load_config(args.config)
    split = _load_split(args.data) if args.data else _generated_split(cfg)
    sw = cfg["sweep"]
    ab = AblationConfig(
        system=split.meta.get("system", cfg["system"]["name"]),
        variants=tuple(sw["ablate_variants"]),
        n_labeled=int(sw["ablate_n_labeled"]),
        seeds=tuple(int(s) for s in sw["seeds"]),
    )
    channels = split.unlabeled[0].channels
    _, deltas = ablate(
        split,
        ab,
        encoder_config_from(cfg, len(channels)),
        predictor_config_from(cfg),
        loss_weights_from(cfg),
        train_config_from(cfg),
        out_dir=args.out_dir,
    )
    write_manifest(args.out_dir, cfg, "ablate", ["ablation.csv", "ablation_summary.csv"])
    for variant, delta in deltas.items():
        print(f"{variant}: {delta:+.1f}% vs full")
    return 0


def _cmd_prop1(args) -> int:
    from .theory import LinearSystemSpec, sample_complexity_experiment

    cfg = load_config(args.config)
    th = cfg["theory"]
    base = LinearSystemSpec(
        n=int(th["n"]),
        d=int(th["d"]),
        k_factors=int(th["k_factors"]),
        deltas=tuple(0.0 for _ in range(int(th["k_factors"]))),
        sigma=float(th["sigma"]),
    )
    specs = [replace(base, n=int(n)) for n in th["n_list"]]
    reports = sample_complexity_experiment(
        specs,
        eps_rel=float(th["eps_rel"]),
        trials=int(th["trials"]),
        seed=int(th["seed"]),
        out_dir=args.out_dir,
        jobs=int(args.jobs),
    )
    write_manifest(args.out_dir, cfg, "prop1", ["sample_complexity.csv", "sample_complexity.svg"])
    for r in reports:
        print(
            f"n={r.spec.n}: supervised {r.n_supervised}, split {r.n_split}, "
            f"ratio {r.ratio:.1f} (parameter ratio {r.spec.theoretical_ratio:.1f})"
        )
    return 0


def _cmd_grad_check(args) -> int:
    from .verification import grad_check_matrix

    cfg = load_config(args.config)
    gc = cfg["gradcheck"]
    reports = grad_check_matrix(
        h=float(gc["h"]), max_coords=int(gc["max_coords"]), seed=int(gc["seed"])
    )
    tol = float(gc["tolerance"])
    worst = 0.0
    ok = True
    for name, report in reports.items():
        status = "ok" if report.ok(tol) else "FAIL"
        print(f"{name}: max rel err {report.max_rel_error:.2e} [{status}]")
        worst = max(worst, report.max_rel_error)
        ok = ok and report.ok(tol)
    print(f"worst over {len(reports)} combinations: {worst:.2e} (tolerance {tol:g})")
    return 0 if ok else 4


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "pretrain": _cmd_pretrain,
    "finetune": _cmd_finetune,
    "evaluate": _cmd_evaluate,
    "rollout": _cmd_rollout,
    "sweep": _cmd_sweep,
    "ablate": _cmd_ablate,
    "prop1": _cmd_prop1,
    "grad-check": _cmd_grad_check,
}


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return _COMMANDS[args.command](args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except DataFormatError as e:
        print(f"data error: {e}", file=sys.stderr)
        return 3
    except NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 4
    except (ValueError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
