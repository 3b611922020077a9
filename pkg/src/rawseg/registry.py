"""Gradient-check registry: one fixture factory per differentiable stage.

Each factory takes a seed and returns a :class:`Case` with a float64 stage,
an 8x8 input, parameters and a run context. ``run_suite`` feeds every case to
:func:`rawseg.diffcore.gradcheck`.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable

import torch

from .diffcore import GradcheckReport, Identity, RunContext, Stage, gradcheck
from .losses import (LossStage, LossWeights, LovaszStage, OhemConfig, OhemStage, SmoothnessConfig,
                     SmoothnessStage)
from .optics import LensParams, NormalizeStage, OpticsStage
from .segnet import Block, ModuleStage, SegNetConfig, SegNetStage, SepConv, SqueezeExcite, build
from .sensor import (ChannelMeanStage, ExposureStage, MosaicStage, NoiseStage, QuantizeStage, init_cfa)

SIZE = 8
DT = torch.float64


@dataclass
class Case:
    stage: Stage
    x: torch.Tensor
    params: dict[str, torch.Tensor] = field(default_factory=dict)
    ctx: RunContext = field(default_factory=RunContext)
    elementwise_max: int = 256


def _gen(seed: int) -> torch.Generator:
    return torch.Generator().manual_seed(seed)


def _rand(g, *shape, lo=0.0, hi=1.0):
    return lo + (hi - lo) * torch.rand(shape, generator=g, dtype=DT)


def _probs(g, C=4, B=2):
    return torch.softmax(torch.randn(B, C, SIZE, SIZE, generator=g, dtype=DT), dim=1)


def _labels(g, C=4, B=2, ignore=True):
    lab = torch.randint(0, C, (B, SIZE, SIZE), generator=g)
    if ignore:
        lab[0, 0, :3] = 255
    return lab


def _min_gap(v: torch.Tensor) -> float:
    s = torch.sort(v.flatten()).values
    return float((s[1:] - s[:-1]).min()) if s.numel() > 1 else 1.0


def _kink_free(g, C=4, B=2, gap=1e-4):
    """Probabilities and labels whose sort orders are stable under FD perturbation.

    OHEM and Lovasz are piecewise smooth with kinks where two per-pixel errors
    tie, so fixtures keep every pair of errors at least ``gap`` apart.
    """
    for _ in range(1000):
        probs, labels = _probs(g, C, B), _labels(g, C, B)
        ok = True
        for b in range(B):
            keep = labels[b] != 255
            y = labels[b][keep]
            p = probs[b][:, keep]
            ce = -torch.log(p.gather(0, y[None]))
            errs = [(( y == c).to(DT) - p[c]).abs() for c in range(C)]
            if min([_min_gap(ce)] + [_min_gap(e) for e in errs]) < gap:
                ok = False
                break
        if ok:
            return probs, labels
    raise RuntimeError("could not draw a kink-free loss fixture")


def _optics(seed):
    g = _gen(seed)
    z = 0.3 * torch.randn(2, 2, 6, generator=g, dtype=DT)
    lens = LensParams(4.0, 2.0, 68.0, zernike=z)
    return Case(OpticsStage(lens, pupil_samples=16, kernel_size=5), _rand(g, 2, 3, SIZE, SIZE, lo=0.1),
                {"optics.zernike": z})


def _normalize(seed):
    g = _gen(seed)
    return Case(NormalizeStage(), _rand(g, 2, 3, SIZE, SIZE, lo=0.1))


def _exposure(seed):
    g = _gen(seed)
    x = _rand(g, 2, 3, SIZE, SIZE, lo=0.02, hi=0.35)
    x[0, 0, 0, :2] = 0.8  # saturated pixels, well away from the clamp edge
    return Case(ExposureStage(), x, {"sensor.gamma": torch.tensor(0.3, dtype=DT)})


def _mosaic(seed, soft: bool, layout="BAYER_RGGB"):
    g = _gen(seed)
    cfa = init_cfa(layout, soft_selection=soft)
    cfa.tau = 0.7
    logits = cfa.logits.clamp_min(-3) + 0.3 * torch.randn(cfa.logits.shape, generator=g, dtype=DT)
    select = cfa.select + 0.5 * torch.randn(cfa.select.shape, generator=g, dtype=DT)
    return Case(MosaicStage(cfa), _rand(g, 2, 3, SIZE, SIZE),
                {"sensor.cfa_logits": logits, "sensor.cfa_select": select})


def _channel_mean(seed):
    return Case(ChannelMeanStage(), _rand(_gen(seed), 2, 3, SIZE, SIZE))


def _noise(seed):
    g = _gen(seed)
    return Case(NoiseStage(), _rand(g, 2, 1, SIZE, SIZE, lo=0.05),
                {"sensor.sigma_s": torch.tensor(0.015, dtype=DT), "sensor.sigma_r": torch.tensor(0.002, dtype=DT)},
                RunContext(seed=seed, step=3))


def _quantize(seed):
    return Case(QuantizeStage(8), _rand(_gen(seed), 2, 1, SIZE, SIZE, lo=0.01))


_TINY_NET = SegNetConfig(num_classes=3, base_width=4, depth=2, se_reduction=2)


def _segnet(seed):
    g = _gen(seed)
    params = {k: v.value.to(DT) for k, v in build(_TINY_NET, seed).items()}
    # zero biases put ReLUs exactly on their kink wherever the input is zero
    for k in params:
        if k.endswith("bias"):
            params[k] = params[k] + 0.1 * torch.randn(params[k].shape, generator=g, dtype=DT)
    # the blocks are checked element by element on their own; the whole net uses directions
    return Case(SegNetStage(_TINY_NET), _rand(g, 1, 1, SIZE, SIZE), params, elementwise_max=16)


def _module(seed, factory, cin, name):
    torch.manual_seed(seed)
    stage = ModuleStage(factory().to(DT), name)
    return Case(stage, torch.randn(2, cin, SIZE, SIZE, generator=_gen(seed), dtype=DT), stage.initial_params())


def _ohem(seed):
    probs, labels = _kink_free(_gen(seed))
    return Case(OhemStage(OhemConfig(hard_fraction=0.25, min_kept=8)), probs, ctx=RunContext(aux={"labels": labels}))


def _lovasz(seed):
    probs, labels = _kink_free(_gen(seed))
    return Case(LovaszStage(), probs, ctx=RunContext(aux={"labels": labels}))


def _smooth(seed):
    g = _gen(seed)
    return Case(SmoothnessStage(SmoothnessConfig(0.1)), _probs(g),
                ctx=RunContext(aux={"guide": _rand(g, 2, 3, SIZE, SIZE)}))


def _total(seed):
    g = _gen(seed)
    probs, labels = _kink_free(g)
    ctx = RunContext(aux={"labels": labels}, outputs={"exposure": _rand(g, 2, 3, SIZE, SIZE)})
    return Case(LossStage(LossWeights(), OhemConfig(0.25, 8)), probs, ctx=ctx)


def _identity(seed):
    return Case(Identity(), _rand(_gen(seed), 2, 3, SIZE, SIZE))


REGISTRY: dict[str, Callable[[int], Case]] = {
    "identity": _identity,
    "optics": _optics,
    "normalize": _normalize,
    "exposure": _exposure,
    "mosaic_hard": lambda s: _mosaic(s, False),
    "mosaic_soft": lambda s: _mosaic(s, True),
    "mosaic_rccc": lambda s: _mosaic(s, False, "RCCC"),
    "channel_mean": _channel_mean,
    "noise": _noise,
    "quantize": _quantize,
    "segnet": _segnet,
    "segnet.sepconv": lambda s: _module(s, lambda: SepConv(3, 5), 3, "sepconv"),
    "segnet.se": lambda s: _module(s, lambda: SqueezeExcite(6, 2), 6, "se"),
    "segnet.block": lambda s: _module(s, lambda: Block(3, 6, 2, True), 3, "block"),
    "loss.ohem": _ohem,
    "loss.lovasz": _lovasz,
    "loss.smoothness": _smooth,
    "loss.total": _total,
}


def run_case(name: str, seed: int, tol: float = 1e-4) -> GradcheckReport:
    case = REGISTRY[name](seed)
    report = gradcheck(case.stage, case.x, case.params, tol=tol, ctx=case.ctx, seed=seed,
                       elementwise_max=case.elementwise_max)
    report.stage = name
    return report


def run_suite(names=None, seeds=range(10), tol: float = 1e-4):
    """Worst report per stage over ``seeds``; returns (reports, seconds)."""
    names = list(names) if names else list(REGISTRY)
    unknown = [n for n in names if n not in REGISTRY]
    if unknown:
        raise KeyError(f"no gradcheck fixture for {', '.join(unknown)}; known: {', '.join(REGISTRY)}")
    t0 = time.perf_counter()
    worst = {}
    for name in names:
        for seed in seeds:
            r = run_case(name, seed, tol)
            if name not in worst or r.max_error > worst[name].max_error or not r.passed:
                worst[name] = r
                if not r.passed:
                    break
    return worst, time.perf_counter() - t0
