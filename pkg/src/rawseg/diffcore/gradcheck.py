"""Finite-difference verification of stage adjoints."""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Mapping

import torch

from .tape import RunContext, Stage

# tensors larger than this are checked along random directions instead of per element
_ELEMENTWISE_MAX = 256
_N_DIRECTIONS = 6


@dataclass
class GradcheckReport:
    stage: str
    errors: dict[str, float] = field(default_factory=dict)
    tol: float = 1e-4
    mode: str = "fd"

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        if self.mode == "ste":
            return self.max_error == 0.0
        return self.max_error < self.tol

    def lines(self) -> list[str]:
        return [f"{self.stage:<16} {k:<28} {v:.3e} {'PASS' if v < self.tol else 'FAIL'}"
                for k, v in self.errors.items()]


def _rel_err(a: torch.Tensor, n: torch.Tensor) -> float:
    scale = max(a.abs().max().item(), n.abs().max().item())
    if scale == 0.0:
        return 0.0
    return (a - n).abs().max().item() / scale


def gradcheck(stage: Stage, x: torch.Tensor, params: Mapping[str, torch.Tensor],
              h: float = 1e-5, tol: float = 1e-4, ctx: RunContext | None = None,
              seed: int = 0, check_input: bool = True,
              elementwise_max: int = _ELEMENTWISE_MAX) -> GradcheckReport:
    """Compare a stage's adjoint with central differences of <u, f(x, params)>.

    ``u`` is a fixed random projection. Straight-through stages are checked in
    STE mode: the backward must reproduce the cotangent exactly. Tensors with
    more than ``elementwise_max`` elements are probed along random directions.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    ctx = ctx or RunContext()
    if stage.stochastic and ctx.seed is None:
        raise RuntimeError(f"stage {stage.name!r} is stochastic; gradcheck needs a fixed seed")
    gen = torch.Generator().manual_seed(seed)
    params = {k: v.clone() for k, v in params.items()}

    def run(xx, pp, record=True):
        c = copy.copy(ctx)
        c.outputs = dict(ctx.outputs)
        c.record = record
        return stage.forward(xx, pp, c)

    y, saved = run(x, params)
    u = torch.randn(y.shape, generator=gen, dtype=y.dtype)
    gx, gp = stage.backward(saved, u)

    if stage.ste:
        report = GradcheckReport(stage.name, tol=tol, mode="ste")
        report.errors["input (ste identity)"] = (gx - u).abs().max().item()
        return report

    def diff(plus, minus, step):
        # perturbed forwards only need values, not a saved graph
        return (u * ((run(*plus, record=False)[0] - run(*minus, record=False)[0]) / step)).sum().item()

    report = GradcheckReport(stage.name, tol=tol)

    def check(name, analytic, base, setter):
        if base.numel() <= elementwise_max:
            numeric = torch.zeros_like(base)
            flat = numeric.view(-1)
            for i in range(base.numel()):
                e = torch.zeros_like(base).view(-1)
                e[i] = h
                e = e.view(base.shape)
                plus, minus = base + e, base - e
                # the step actually taken after rounding
                step = (plus - minus).view(-1)[i].item()
                flat[i] = diff(setter(plus), setter(minus), step)
            report.errors[name] = _rel_err(analytic, numeric)
        else:
            a_dirs, n_dirs = [], []
            for _ in range(_N_DIRECTIONS):
                d = torch.randn(base.shape, generator=gen, dtype=base.dtype)
                a_dirs.append((analytic * d).sum().item())
                n_dirs.append(diff(setter(base + h * d), setter(base - h * d), 2 * h))
            f64 = torch.float64
            report.errors[name] = _rel_err(torch.tensor(a_dirs, dtype=f64), torch.tensor(n_dirs, dtype=f64))

    if check_input and gx is not None and x.is_floating_point():
        check("input", gx, x, lambda xx: (xx, params))
    for k in stage.param_names:
        if k not in gp:
            continue

        def setter(v, k=k):
            pp = dict(params)
            pp[k] = v
            return x, pp

        check(k, gp[k], params[k], setter)
    return report
