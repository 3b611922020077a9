"""Stage-level reverse mode: each stage owns a forward and an explicit adjoint.

The pipeline is a short fixed chain, so instead of expression-level autodiff a
tape records one entry per stage application and replays the stage adjoints in
reverse order.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from typing import Any, Mapping, Sequence

import numpy as np
import torch

from .params import ParamSet


class CompositionError(ValueError):
    """Two adjacent stages disagree on the shape of the signal between them."""


class ShapeError(ValueError):
    """Raised by a stage whose input does not have the shape it expects."""


class NumericFailure(FloatingPointError):
    def __init__(self, stage: str, what: str = "output"):
        super().__init__(f"non-finite values in {what} of stage {stage!r}")
        self.stage = stage


def stage_id(name: str) -> int:
    return zlib.crc32(name.encode())


@dataclass
class RunContext:
    """Per-evaluation state shared by all stages of one forward pass.

    ``seed`` + ``step`` + the stage id key the counter-based RNG, so a forward
    can be replayed bit for bit. ``aux`` carries non-differentiable side inputs
    (labels, eval flags); ``outputs`` is filled with each stage's forward result
    so later stages may read earlier signals as constants.
    """

    seed: int | None = None
    step: int = 0
    training: bool = True
    record: bool = True
    aux: dict[str, Any] = field(default_factory=dict)
    outputs: dict[str, torch.Tensor] = field(default_factory=dict)

    def rng(self, name: str) -> np.random.Generator:
        if self.seed is None:
            raise RuntimeError(f"stage {name!r} is stochastic and needs a fixed seed")
        seq = np.random.SeedSequence([int(self.seed), int(self.step), stage_id(name)])
        return np.random.Generator(np.random.Philox(seq))

    def normal(self, name: str, shape: Sequence[int], like: torch.Tensor) -> torch.Tensor:
        draws = self.rng(name).standard_normal(tuple(shape))
        return torch.from_numpy(draws).to(dtype=like.dtype, device=like.device)


class Stage:
    """One differentiable block of the chain.

    Subclasses implement ``forward(x, params, ctx) -> (y, saved)`` and
    ``backward(saved, g) -> (g_x, {param: g_param})``. The backward must be
    linear in ``g`` and return cotangents shaped like ``x`` and the params.
    """

    name = "stage"
    param_names: tuple[str, ...] = ()
    stochastic = False
    #: backward intentionally differs from the true derivative (straight-through)
    ste = False

    def forward(self, x: torch.Tensor, params: Mapping[str, torch.Tensor], ctx: RunContext):
        raise NotImplementedError

    def backward(self, saved: Any, g: torch.Tensor):
        raise NotImplementedError

    def __repr__(self) -> str:
        return f"{type(self).__name__}({self.name!r})"


class Identity(Stage):
    name = "identity"

    def forward(self, x, params, ctx):
        return x, None

    def backward(self, saved, g):
        return g, {}


class AutogradStage(Stage):
    """Stage whose adjoint is the vector-Jacobian product of a torch graph.

    Subclasses implement ``apply(x, params, ctx)`` with differentiable torch ops.
    """

    def apply(self, x, params, ctx):
        raise NotImplementedError

    def forward(self, x, params, ctx):
        mine = {k: params[k] for k in self.param_names}
        if not ctx.record:
            with torch.no_grad():
                return self.apply(x, mine, ctx), None
        with torch.enable_grad():
            xd = x.detach()
            if xd.is_floating_point():
                xd.requires_grad_(True)
            pd = {k: v.detach().requires_grad_(True) for k, v in mine.items()}
            y = self.apply(xd, pd, ctx)
        return y.detach(), (y, xd, pd)

    def backward(self, saved, g):
        y, xd, pd = saved
        leaves = ([xd] if xd.requires_grad else []) + list(pd.values())
        grads = torch.autograd.grad(y, leaves, g, allow_unused=True, retain_graph=True)
        gx = None
        if xd.requires_grad:
            gx, grads = grads[0], grads[1:]
            gx = torch.zeros_like(xd) if gx is None else gx
        gp = {k: torch.zeros_like(v) if gk is None else gk for (k, v), gk in zip(pd.items(), grads)}
        return gx, gp


@dataclass
class TapeResult:
    output: torch.Tensor
    grads: dict[str, torch.Tensor]
    input_grad: torch.Tensor | None
    intermediates: dict[str, torch.Tensor]


def _param_view(params: ParamSet | Mapping[str, torch.Tensor]) -> Mapping[str, torch.Tensor]:
    return params.values() if isinstance(params, ParamSet) else params


def first_nonfinite(tensors: Mapping[str, torch.Tensor]) -> str | None:
    """Name of the first tensor holding a NaN or inf, or None; one fused check when all are finite."""
    flat = [t.reshape(-1) for t in tensors.values() if t.is_floating_point()]
    if not flat or torch.isfinite(torch.cat(flat)).all():
        return None
    return next(k for k, t in tensors.items() if t.is_floating_point() and not torch.isfinite(t).all())


def run_forward(stages: Sequence[Stage], x: torch.Tensor, params, ctx: RunContext | None = None,
                record: bool = False):
    """Apply the stage forwards in order; returns (output, tape entries)."""
    ctx = ctx or RunContext()
    ctx.record = record
    values = _param_view(params)
    tape = []
    prev = "input"
    for stage in stages:
        try:
            y, saved = stage.forward(x, values, ctx)
        except ShapeError as e:
            raise CompositionError(f"{prev!r} -> {stage.name!r}: {e}") from e
        if y.is_floating_point() and not torch.isfinite(y).all():
            raise NumericFailure(stage.name)
        ctx.outputs[stage.name] = y
        tape.append((stage, saved))
        x = y
        prev = stage.name
    return x, tape


def backward_tape(tape, params, cotangent: torch.Tensor, input_grad: bool = True):
    """Replay stage adjoints in reverse. Frozen parameters receive zeros.

    With ``input_grad=False`` the replay stops once no earlier stage owns an
    updatable parameter, and the returned input gradient is None.
    """
    values = _param_view(params)
    grads = {k: torch.zeros_like(v) for k, v in values.items()}
    stop = 0
    if not input_grad:
        live = [i for i, (stage, _) in enumerate(tape)
                if any(not isinstance(params, ParamSet) or params[k].updatable for k in stage.param_names)]
        stop = live[0] if live else len(tape)
    g = cotangent
    for stage, saved in reversed(tape[stop:]):
        if g is None:
            break
        gx, gp = stage.backward(saved, g)
        for k, gk in gp.items():
            if gk.shape != values[k].shape:
                raise CompositionError(f"stage {stage.name!r} returned cotangent of shape "
                                       f"{tuple(gk.shape)} for {k!r} {tuple(values[k].shape)}")
        bad = first_nonfinite(gp)
        if bad is not None:
            raise NumericFailure(stage.name, f"gradient of {bad!r}")
        for k, gk in gp.items():
            grads[k] = grads[k] + gk
        g = gx
    if not input_grad:
        g = None
    if isinstance(params, ParamSet):
        for k, p in params.items():
            if not p.updatable:
                grads[k] = torch.zeros_like(p.value)
    return grads, g


def forward_backward(stages: Sequence[Stage], x: torch.Tensor, params,
                     ctx: RunContext | None = None,
                     cotangent: torch.Tensor | None = None, input_grad: bool = True) -> TapeResult:
    """Forward through ``stages`` then pull ``cotangent`` back to inputs and params.

    A scalar output with no explicit cotangent is seeded with 1.
    """
    ctx = ctx or RunContext()
    out, tape = run_forward(stages, x, params, ctx, record=True)
    if cotangent is None:
        if out.numel() != 1:
            raise ValueError("cotangent required for non-scalar output")
        cotangent = torch.ones_like(out)
    elif cotangent.shape != out.shape:
        raise ShapeError(f"cotangent shape {tuple(cotangent.shape)} != output {tuple(out.shape)}")
    grads, gx = backward_tape(tape, params, cotangent, input_grad)
    return TapeResult(out, grads, gx, dict(ctx.outputs))
