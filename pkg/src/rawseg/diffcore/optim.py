"""AdamW with decoupled weight decay, per-group step scaling, cosine schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import torch

from .params import ParamSet
from .tape import first_nonfinite


@dataclass
class OptimState:
    lr: float = 2e-3
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    exp_avg: dict[str, torch.Tensor] = field(default_factory=dict)
    exp_avg_sq: dict[str, torch.Tensor] = field(default_factory=dict)
    # per-parameter step counts, so a group unfrozen late gets its own bias correction
    counts: dict[str, int] = field(default_factory=dict)

    def ensure(self, params: ParamSet) -> None:
        for k, p in params.items():
            if k not in self.exp_avg:
                self.exp_avg[k] = torch.zeros_like(p.value)
                self.exp_avg_sq[k] = torch.zeros_like(p.value)
                self.counts[k] = 0


def adamw_step(state: OptimState, params: ParamSet, grads: Mapping[str, torch.Tensor],
               group_scale: Mapping[str, float] | None = None) -> dict[str, torch.Tensor]:
    """One AdamW update in place; returns the applied update per parameter.

    ``group_scale`` multiplies the whole step of a parameter group (used for
    optics throttling). Frozen or non-trainable parameters, and their moments,
    are left untouched.
    """
    if state.lr <= 0:
        raise ValueError(f"learning rate must be positive, got {state.lr}")
    group_scale = group_scale or {}
    bad = first_nonfinite({k: g for k, g in grads.items() if k in params and params[k].updatable})
    if bad is not None:
        raise FloatingPointError(f"non-finite gradient for parameter {bad!r}")
    state.ensure(params)
    state.step += 1
    # parameters sharing a step count and scale are updated with one set of foreach ops
    batches: dict[tuple[int, float], list[str]] = {}
    for name, p in params.items():
        if not p.updatable or grads.get(name) is None:
            continue
        g = grads[name]
        if g.shape != p.value.shape:
            raise ValueError(f"gradient shape {tuple(g.shape)} != parameter {name!r} {tuple(p.value.shape)}")
        state.counts[name] += 1
        batches.setdefault((state.counts[name], group_scale.get(p.group, 1.0)), []).append(name)
    updates = {}
    for (t, scale), names in batches.items():
        values = [params[k].value for k in names]
        g = [grads[k].to(params[k].value.dtype) for k in names]
        m = [state.exp_avg[k] for k in names]
        v = [state.exp_avg_sq[k] for k in names]
        torch._foreach_mul_(m, state.beta1)
        torch._foreach_add_(m, g, alpha=1 - state.beta1)
        torch._foreach_mul_(v, state.beta2)
        torch._foreach_addcmul_(v, g, g, value=1 - state.beta2)
        denom = torch._foreach_sqrt(torch._foreach_div(v, 1 - state.beta2 ** t))
        torch._foreach_add_(denom, state.eps)
        step = torch._foreach_div(torch._foreach_div(m, 1 - state.beta1 ** t), denom)
        torch._foreach_add_(step, values, alpha=state.weight_decay)
        delta = torch._foreach_mul(step, -(state.lr * scale))
        torch._foreach_add_(values, delta)
        updates.update(zip(names, delta))
    return updates


def cosine_lr(step: int, total_steps: int, lr_max: float, lr_min: float = 0.0) -> float:
    if total_steps <= 0:
        raise ValueError("total_steps must be positive")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return lr_min + 0.5 * (lr_max - lr_min) * (1 + math.cos(math.pi * step / total_steps))
