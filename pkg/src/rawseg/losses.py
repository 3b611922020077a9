"""Segmentation objectives: OHEM cross-entropy, Lovasz-softmax, edge-aware smoothness.

All losses take probabilities laid out as (B, C, H, W) (or (C, H, W)) and
integer labels (B, H, W) with ``IGNORE`` marking unscored pixels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from .diffcore import AutogradStage, ShapeError

IGNORE = 255
PROB_FLOOR = 1e-12


@dataclass
class OhemConfig:
    hard_fraction: float = 0.25
    min_kept: int = 1024

    def __post_init__(self):
        if not 0 < self.hard_fraction <= 1:
            raise ValueError("hard_fraction must lie in (0, 1]")
        if self.min_kept < 1:
            raise ValueError("min_kept must be >= 1")

    def kept(self, valid: int) -> int:
        return min(valid, max(self.min_kept, math.ceil(self.hard_fraction * valid)))


@dataclass
class SmoothnessConfig:
    tau_w: float = 0.1

    def __post_init__(self):
        if self.tau_w <= 0:
            raise ValueError("tau_w must be > 0")


@dataclass
class LossWeights:
    w_ohem: float = 0.6
    w_lovasz: float = 0.4
    lambda_smooth: float = 0.1
    adaptive: bool = False

    def __post_init__(self):
        if min(self.w_ohem, self.w_lovasz, self.lambda_smooth) < 0:
            raise ValueError("loss weights must be >= 0")


def _batched(probs, labels):
    if probs.dim() == 3:
        probs = probs.unsqueeze(0)
        labels = labels.unsqueeze(0)
    if labels.shape != probs.shape[:1] + probs.shape[2:]:
        raise ShapeError(f"labels {tuple(labels.shape)} do not match probabilities {tuple(probs.shape)}")
    return probs, labels


def _check_labels(labels, C):
    bad = (labels != IGNORE) & ((labels < 0) | (labels >= C))
    if bad.any():
        raise ValueError(f"label values outside [0, {C}) and != {IGNORE}")


def pixel_ce(probs: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Per-pixel cross-entropy (B, H, W); ignored pixels get 0."""
    probs, labels = _batched(probs, labels)
    valid = labels != IGNORE
    idx = torch.where(valid, labels, torch.zeros_like(labels)).unsqueeze(1)
    p = probs.gather(1, idx).squeeze(1)
    return torch.where(valid, -torch.log(p.clamp_min(PROB_FLOOR)), torch.zeros_like(p))


def ohem_ce(probs: torch.Tensor, labels: torch.Tensor, cfg: OhemConfig = OhemConfig()) -> torch.Tensor:
    """Mean cross-entropy over the hardest pixels of each image, averaged over images."""
    probs, labels = _batched(probs, labels)
    _check_labels(labels, probs.shape[1])
    ce = pixel_ce(probs, labels)
    losses = []
    for b in range(ce.shape[0]):
        valid = (labels[b] != IGNORE).reshape(-1)
        if not valid.any():
            continue
        vals = ce[b].reshape(-1)[valid]
        k = cfg.kept(vals.numel())
        # stable descending sort keeps raster order among ties
        order = torch.sort(vals.detach(), descending=True, stable=True).indices[:k]
        losses.append(vals[order].mean())
    if not losses:
        raise ValueError("every pixel is ignored")
    return torch.stack(losses).mean()


def lovasz_grad(gt_sorted: torch.Tensor) -> torch.Tensor:
    """Gradient of the Lovasz extension of the Jaccard loss w.r.t. sorted errors."""
    gts = gt_sorted.sum()
    intersection = gts - gt_sorted.cumsum(0)
    union = gts + (1 - gt_sorted).cumsum(0)
    jaccard = 1.0 - intersection / union
    if gt_sorted.numel() > 1:
        jaccard = torch.cat([jaccard[:1], jaccard[1:] - jaccard[:-1]])
    return jaccard


def _lovasz_flat(probs: torch.Tensor, labels: torch.Tensor) -> torch.Tensor | None:
    """probs (P, C), labels (P,) already stripped of ignored pixels."""
    per_class = []
    for c in range(probs.shape[1]):
        fg = (labels == c).to(probs.dtype)
        if fg.sum() == 0:
            continue
        errors = (fg - probs[:, c]).abs()
        errors_sorted, perm = torch.sort(errors, descending=True, stable=True)
        per_class.append(torch.dot(errors_sorted, lovasz_grad(fg[perm])))
    if not per_class:
        return None
    return torch.stack(per_class).mean()


def lovasz_softmax(probs: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Lovasz-softmax over classes present in the labels, averaged over images."""
    probs, labels = _batched(probs, labels)
    C = probs.shape[1]
    losses = []
    for b in range(probs.shape[0]):
        p = probs[b].reshape(C, -1).t()
        y = labels[b].reshape(-1)
        keep = y != IGNORE
        loss = _lovasz_flat(p[keep], y[keep])
        if loss is not None:
            losses.append(loss)
    if not losses:
        return probs.sum() * 0.0
    return torch.stack(losses).mean()


def smoothness(probs: torch.Tensor, guide: torch.Tensor, cfg: SmoothnessConfig = SmoothnessConfig()) -> torch.Tensor:
    """Edge-aware L1 difference of neighbouring probability vectors (4-connectivity)."""
    if probs.dim() == 3:
        probs = probs.unsqueeze(0)
    if guide.dim() == 3:
        guide = guide.unsqueeze(0)
    if probs.shape[-2:] != guide.shape[-2:]:
        raise ShapeError(f"guide {tuple(guide.shape)} does not match probabilities {tuple(probs.shape)}")
    g = guide.detach().mean(dim=1)
    wx = torch.exp(-(g[..., :, 1:] - g[..., :, :-1]).abs() / cfg.tau_w)
    wy = torch.exp(-(g[..., 1:, :] - g[..., :-1, :]).abs() / cfg.tau_w)
    dx = (probs[..., :, 1:] - probs[..., :, :-1]).abs().sum(dim=1)
    dy = (probs[..., 1:, :] - probs[..., :-1, :]).abs().sum(dim=1)
    n_pairs = dx[0].numel() + dy[0].numel()
    if n_pairs == 0:
        return probs.sum() * 0.0
    per_image = ((wx * dx).sum(dim=(-2, -1)) + (wy * dy).sum(dim=(-2, -1))) / n_pairs
    return per_image.mean()


def adaptive_schedule(progress: float, weights: LossWeights, ohem: OhemConfig) -> tuple[float, float]:
    """(hard_fraction, lambda_smooth) at a point of training.

    With adaptive weighting both ramp linearly over the first half of training:
    the OHEM hard fraction from 1.0 down to its configured value and the
    smoothness weight from 0 up to its configured value.
    """
    if not 0 <= progress <= 1:
        raise ValueError("progress must lie in [0, 1]")
    if not weights.adaptive:
        return ohem.hard_fraction, weights.lambda_smooth
    t = min(1.0, progress / 0.5)
    return 1.0 + t * (ohem.hard_fraction - 1.0), t * weights.lambda_smooth


def total_loss(l_ohem, l_lovasz, l_smooth, weights: LossWeights = LossWeights(), progress: float = 1.0):
    lam = adaptive_schedule(progress, weights, OhemConfig())[1]
    return weights.w_ohem * l_ohem + weights.w_lovasz * l_lovasz + lam * l_smooth


class LossStage(AutogradStage):
    """Terminal stage: probabilities -> scalar total loss.

    Labels come from ``ctx.aux['labels']``; the smoothness guide is the output of
    the stage named ``guide_stage`` (the exposure output by default).
    """

    name = "loss"

    def __init__(self, weights: LossWeights = LossWeights(), ohem: OhemConfig = OhemConfig(),
                 smooth: SmoothnessConfig = SmoothnessConfig(), guide_stage: str = "exposure"):
        self.weights = weights
        self.ohem = ohem
        self.smooth = smooth
        self.guide_stage = guide_stage
        self.progress = 1.0
        self.last_terms: dict[str, float] = {}

    def guide(self, ctx, probs):
        for name in (self.guide_stage, "normalize", "optics", "input"):
            if name in ctx.outputs and ctx.outputs[name].dim() == 4:
                return ctx.outputs[name]
        return ctx.aux.get("guide", probs)

    def apply(self, x, params, ctx):
        labels = ctx.aux["labels"]
        hard_fraction, lam = adaptive_schedule(self.progress, self.weights, self.ohem)
        l_ohem = ohem_ce(x, labels, OhemConfig(hard_fraction, self.ohem.min_kept))
        l_lov = lovasz_softmax(x, labels)
        l_sm = smoothness(x, self.guide(ctx, x), self.smooth) if lam > 0 else x.sum() * 0.0
        total = self.weights.w_ohem * l_ohem + self.weights.w_lovasz * l_lov + lam * l_sm
        self.last_terms = {"l_ohem": l_ohem.item(), "l_lovasz": l_lov.item(), "l_smooth": l_sm.item(),
                           "l_total": total.item()}
        return total


class OhemStage(AutogradStage):
    name = "ohem"

    def __init__(self, cfg: OhemConfig = OhemConfig()):
        self.cfg = cfg

    def apply(self, x, params, ctx):
        return ohem_ce(x, ctx.aux["labels"], self.cfg)


class LovaszStage(AutogradStage):
    name = "lovasz"

    def apply(self, x, params, ctx):
        return lovasz_softmax(x, ctx.aux["labels"])


class SmoothnessStage(AutogradStage):
    name = "smoothness"

    def __init__(self, cfg: SmoothnessConfig = SmoothnessConfig()):
        self.cfg = cfg

    def apply(self, x, params, ctx):
        return smoothness(x, ctx.aux["guide"], self.cfg)
