"""Dataset assembly: oracle-generated pools with the label-free split discipline.

Unlabeled records never contain the supervised target: the steady benchmark
keeps only its input parameter field, and time-dependent systems store
sub-timestep intermediates but drop the final-time state.
"""
from __future__ import annotations

from dataclasses import dataclass

from .fields import DatasetSplit, Trajectory
from .numerics import Grid2D, SeededRng
from .solvers import AdrGen, Darcy1Gen, TwoPhaseGen, generate_trajectory

__all__ = ["PoolSizes", "default_gen", "make_dataset"]


@dataclass(frozen=True)
class PoolSizes:
    unlabeled: int
    labeled: int
    test: int

    @classmethod
    def from_total(cls, n: int) -> "PoolSizes":
        """Default 70/20/10 split; every pool gets at least one record."""
        n_u = max(1, int(round(0.7 * n)))
        n_l = max(1, int(round(0.2 * n)))
        n_t = max(1, n - n_u - n_l)
        return cls(n_u, n_l, n_t)

    @property
    def total(self) -> int:
        return self.unlabeled + self.labeled + self.test


def default_gen(system: str, cfg: dict | None = None):
    cfg = cfg or {}
    if system == "darcy1":
        return Darcy1Gen(
            corr_len=cfg.get("corr_len", 0.1),
            sigma_logk=cfg.get("sigma_logk", 1.0),
            two_level=cfg.get("two_level", False),
            p_left=cfg.get("p_left", 1.0),
            p_right=cfg.get("p_right", 0.0),
        )
    if system == "twophase":
        from .solvers import BoundaryConditions, TwoPhaseParams

        fluid = TwoPhaseParams(
            mu_w=cfg.get("mu_w", 1.0),
            mu_n=cfg.get("mu_n", 0.5),
            lam=cfg.get("lam", 2.0),
            s_wr=cfg.get("s_wr", 0.1),
            s_nr=cfg.get("s_nr", 0.1),
            p_entry=cfg.get("p_entry", 0.0),
            porosity=cfg.get("porosity", 0.2),
            bc=BoundaryConditions(
                p_left=cfg.get("p_left", 1.0), p_right=cfg.get("p_right", 0.0)
            ),
        )
        return TwoPhaseGen(
            corr_len=cfg.get("corr_len", 0.1),
            sigma_logk=cfg.get("sigma_logk", 1.0),
            fluid=fluid,
        )
    if system == "adr":
        return AdrGen(
            corr_len=cfg.get("corr_len", 0.1),
            sigma_logk=cfg.get("sigma_logk", 1.0),
            pe=cfg.get("pe", 1.0),
            da=cfg.get("da", 0.1),
            p_left=cfg.get("p_left", 1.0),
            p_right=cfg.get("p_right", 0.0),
        )
    raise ValueError(f"unknown system {system!r}")


def _strip_label(system: str, traj: Trajectory) -> Trajectory:
    if system == "darcy1":
        # parameter field only: the solved pressure never enters the pool
        return Trajectory(
            traj.grid,
            traj.seed,
            [traj.snapshots[0], traj.snapshots[0]],
            static_params=traj.static_params,
        )
    # drop the final-time state; sub-step intermediates remain
    return Trajectory(
        traj.grid,
        traj.seed,
        traj.snapshots[:-1],
        static_params=traj.static_params,
        substeps=traj.substeps,
    )


def make_dataset(
    system: str,
    grid: Grid2D,
    sizes: PoolSizes,
    base_seed: int,
    t_steps: int = 10,
    gen_cfg: dict | None = None,
) -> DatasetSplit:
    """Generate disjoint unlabeled/labeled/test pools, one rng stream per record."""
    gen = default_gen(system, gen_cfg)
    if system != "darcy1" and t_steps < 2:
        raise ValueError("time-dependent systems need t_steps >= 2 for unlabeled pools")

    def run(stream: int, substeps: bool) -> Trajectory:
        return generate_trajectory(
            system, grid, gen, t_steps, SeededRng(base_seed, stream), record_substeps=substeps
        )

    unlabeled = [
        _strip_label(system, run(i, system != "darcy1")) for i in range(sizes.unlabeled)
    ]
    labeled = [run(sizes.unlabeled + i, False) for i in range(sizes.labeled)]
    test = [
        run(sizes.unlabeled + sizes.labeled + i, False) for i in range(sizes.test)
    ]
    meta = {
        "system": system,
        "base_seed": base_seed,
        "t_steps": t_steps,
        "notes": {
            "dimensionless_groups": "Pe = |v| L / D, Da = k L / |v|, L = 1, unit mean face speed"
        },
    }
    return DatasetSplit(unlabeled=unlabeled, labeled=labeled, test=test, meta=meta)
