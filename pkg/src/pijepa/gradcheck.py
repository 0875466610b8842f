"""Central-finite-difference verification of analytic gradients.

The contract for every differentiable loss in the package: build the model in
float64, wrap the loss in a zero-argument closure, and compare autograd
against (f(p+h) - f(p-h)) / 2h on a seeded subsample of coordinates.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import torch

from .numerics import SeededRng

__all__ = ["TensorGradReport", "GradReport", "grad_check"]

_REL_FLOOR = 1e-8


@dataclass
class TensorGradReport:
    name: str
    checked: int
    max_rel_error: float
    worst_coord: int = -1
    frozen: bool = False
    failure: str | None = None


@dataclass
class GradReport:
    """Per-tensor worst relative error between analytic and FD gradients."""

    step: float
    tensors: dict[str, TensorGradReport] = field(default_factory=dict)

    @property
    def max_rel_error(self) -> float:
        errs = [t.max_rel_error for t in self.tensors.values() if not t.frozen]
        return max(errs, default=0.0)

    @property
    def failures(self) -> list[str]:
        return [t.name for t in self.tensors.values() if t.failure is not None]

    def ok(self, tol: float = 1e-4) -> bool:
        return not self.failures and self.max_rel_error < tol


def _rel_err(ga: float, gf: float) -> float:
    return abs(ga - gf) / max(abs(ga), abs(gf), _REL_FLOOR)


def grad_check(
    loss_fn: Callable[[], torch.Tensor],
    params: dict[str, torch.Tensor],
    h: float = 1e-5,
    rng: SeededRng | None = None,
    max_coords: int = 256,
) -> GradReport:
    """Check autograd gradients of ``loss_fn`` w.r.t. ``params``.

    ``loss_fn`` must rebuild its graph on every call (a plain closure over the
    parameter tensors). Tensors with ``requires_grad=False`` are reported as
    frozen: their analytic gradient is zero by construction, so no FD probe is
    run against them. All tensors must be float64.
    """
    if not (1e-5 <= h <= 1e-3):
        raise ValueError(f"step size h={h} outside [1e-5, 1e-3]")
    for name, p in params.items():
        if p.dtype != torch.float64:
            raise ValueError(f"grad_check requires float64 params; {name} is {p.dtype}")
    rng = rng or SeededRng(0)

    report = GradReport(step=h)

    loss = loss_fn()
    if loss.dim() != 0:
        raise ValueError("loss_fn must return a scalar")
    if not torch.isfinite(loss):
        for name in params:
            report.tensors[name] = TensorGradReport(
                name, 0, float("inf"), failure="loss is NaN/Inf at the base point"
            )
        return report

    trainable = {n: p for n, p in params.items() if p.requires_grad}
    grads = torch.autograd.grad(
        loss, list(trainable.values()), allow_unused=True, retain_graph=False
    )
    analytic = {
        n: (g if g is not None else torch.zeros_like(p))
        for (n, p), g in zip(trainable.items(), grads)
    }

    for name, p in params.items():
        if not p.requires_grad:
            report.tensors[name] = TensorGradReport(name, 0, 0.0, frozen=True)
            continue
        n = p.numel()
        k = min(max_coords, n)
        coords = rng.gen.choice(n, size=k, replace=False) if k < n else range(n)
        flat = p.detach().view(-1)
        ga_flat = analytic[name].reshape(-1)
        worst = 0.0
        worst_coord = -1
        failure = None
        with torch.no_grad():
            for c in coords:
                c = int(c)
                orig = flat[c].item()
                flat[c] = orig + h
                f_plus = float(loss_fn())
                flat[c] = orig - h
                f_minus = float(loss_fn())
                flat[c] = orig
                if not (f_plus == f_plus and f_minus == f_minus):  # NaN probe
                    failure = f"NaN in loss while probing coordinate {c}"
                    break
                g_fd = (f_plus - f_minus) / (2.0 * h)
                err = _rel_err(float(ga_flat[c]), g_fd)
                if err > worst:
                    worst = err
                    worst_coord = c
        report.tensors[name] = TensorGradReport(
            name, k, worst if failure is None else float("inf"), worst_coord, False, failure
        )
    return report
