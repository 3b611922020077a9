"""Compact UNet on the single-channel mosaic: depthwise-separable convs + SE gating."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.func import functional_call

from .diffcore import AutogradStage, NumericFailure, ParamSet, RunContext, ShapeError

PREFIX = "net."


@dataclass
class SegNetConfig:
    num_classes: int = 19
    base_width: int = 16
    depth: int = 4
    se_reduction: int = 4
    param_budget: int = 500_000
    in_channels: int = 1
    group_norm: bool = False

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.depth < 1 or self.base_width < 1 or self.se_reduction < 1:
            raise ValueError("depth, base_width and se_reduction must be positive")

    @property
    def widths(self) -> list[int]:
        return [self.base_width * 2 ** i for i in range(self.depth + 1)]


def _norm(c: int, on: bool) -> nn.Module:
    return nn.GroupNorm(math.gcd(4, c), c) if on else nn.Identity()


class SepConv(nn.Module):
    """3x3 depthwise conv, 1x1 pointwise conv, ReLU."""

    def __init__(self, cin: int, cout: int, norm: bool = False):
        super().__init__()
        self.dw = nn.Conv2d(cin, cin, 3, padding=1, groups=cin)
        self.pw = nn.Conv2d(cin, cout, 1)
        self.norm = _norm(cout, norm)

    def forward(self, x):
        return F.relu(self.norm(self.pw(self.dw(x))))


class SqueezeExcite(nn.Module):
    def __init__(self, c: int, reduction: int):
        super().__init__()
        hidden = max(1, c // reduction)
        self.fc1 = nn.Linear(c, hidden)
        self.fc2 = nn.Linear(hidden, c)

    def forward(self, x):
        s = x.mean(dim=(-2, -1))
        s = torch.sigmoid(self.fc2(F.relu(self.fc1(s))))
        return x * s[..., None, None]


class Block(nn.Sequential):
    def __init__(self, cin: int, cout: int, reduction: int, norm: bool):
        super().__init__(SepConv(cin, cout, norm), SepConv(cout, cout, norm), SqueezeExcite(cout, reduction))


class SegNet(nn.Module):
    def __init__(self, cfg: SegNetConfig):
        super().__init__()
        self.cfg = cfg
        w = cfg.widths
        self.stem = nn.Conv2d(cfg.in_channels, w[0], 3, padding=1)
        self.enc = nn.ModuleList(Block(w[i], w[i + 1], cfg.se_reduction, cfg.group_norm)
                                 for i in range(cfg.depth))
        self.dec = nn.ModuleList(Block(2 * w[i + 1], w[i], cfg.se_reduction, cfg.group_norm)
                                 for i in range(cfg.depth))
        self.head = nn.Conv2d(w[0], cfg.num_classes, 1)

    def forward(self, x):
        """(B, 1, H, W) raw mosaic -> (B, C, H, W) class probabilities."""
        H, W = x.shape[-2:]
        m = 2 ** self.cfg.depth
        ph, pw = (-H) % m, (-W) % m
        if ph or pw:
            x = F.pad(x, (0, pw, 0, ph), mode="reflect" if ph < H and pw < W else "replicate")
        x = _finite(F.relu(self.stem(x)), "stem")
        skips = []
        for i, block in enumerate(self.enc):
            x = _finite(block(x), f"enc{i}")
            skips.append(x)
            x = F.avg_pool2d(x, 2)
        for i in reversed(range(self.cfg.depth)):
            x = F.interpolate(x, size=skips[i].shape[-2:], mode="bilinear", align_corners=False)
            x = _finite(self.dec[i](torch.cat([x, skips[i]], dim=1)), f"dec{i}")
        logits = _finite(self.head(x), "head")[..., :H, :W]
        return torch.softmax(logits, dim=1)


def _finite(x: torch.Tensor, layer: str) -> torch.Tensor:
    if not torch.isfinite(x).all():
        raise NumericFailure(f"segnet.{layer}")
    return x


def param_count(cfg: SegNetConfig) -> int:
    """Closed-form parameter count of :class:`SegNet` for ``cfg``."""

    def sep(a, b):
        return 9 * a + a + a * b + b + (2 * b if cfg.group_norm else 0)

    def se(c):
        h = max(1, c // cfg.se_reduction)
        return c * h + h + h * c + c

    w = cfg.widths
    total = 9 * cfg.in_channels * w[0] + w[0]
    for i in range(cfg.depth):
        total += sep(w[i], w[i + 1]) + sep(w[i + 1], w[i + 1]) + se(w[i + 1])
        total += sep(2 * w[i + 1], w[i]) + sep(w[i], w[i]) + se(w[i])
    return total + w[0] * cfg.num_classes + cfg.num_classes


def _he_init(module: nn.Module, gen: torch.Generator) -> None:
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            fan_in = m.weight[0].numel()
            with torch.no_grad():
                m.weight.copy_(torch.randn(m.weight.shape, generator=gen) * (2.0 / fan_in) ** 0.5)
                m.bias.zero_()


def build(cfg: SegNetConfig, seed: int = 0, params: ParamSet | None = None,
          trainable: bool = True) -> ParamSet:
    """He-initialized network parameters, added to ``params`` under ``net.``."""
    count = param_count(cfg)
    if count > cfg.param_budget:
        raise ValueError(f"network has {count} parameters, budget is {cfg.param_budget}")
    net = SegNet(cfg)
    _he_init(net, torch.Generator().manual_seed(seed))
    actual = sum(p.numel() for p in net.parameters())
    assert actual == count, (actual, count)
    params = params if params is not None else ParamSet()
    for name, p in net.named_parameters():
        params.add(PREFIX + name, p.detach(), "network", trainable)
    return params


class SegNetStage(AutogradStage):
    name = "segnet"

    def __init__(self, cfg: SegNetConfig):
        self.cfg = cfg
        self.net = SegNet(cfg)
        self.param_names = tuple(PREFIX + n for n, _ in self.net.named_parameters())

    def apply(self, x, params, ctx):
        if x.dim() != 4 or x.shape[1] != self.cfg.in_channels:
            raise ShapeError(f"segnet expects (B, {self.cfg.in_channels}, H, W), got {tuple(x.shape)}")
        weights = {k[len(PREFIX):]: v for k, v in params.items()}
        return functional_call(self.net, weights, (x,))


def forward(params: ParamSet | dict, raw: torch.Tensor, cfg: SegNetConfig) -> torch.Tensor:
    values = params.values() if isinstance(params, ParamSet) else params
    stage = SegNetStage(cfg)
    squeeze = raw.dim() == 3
    x = raw.unsqueeze(0) if squeeze else raw
    y, _ = stage.forward(x.to(next(iter(values.values())).dtype), values, RunContext(record=False))
    return y[0] if squeeze else y


class ModuleStage(AutogradStage):
    """A single network sub-module run as its own stage (used to check blocks in isolation)."""

    def __init__(self, module: nn.Module, name: str):
        self.module = module
        self.name = name
        self.param_names = tuple(f"{name}.{n}" for n, _ in module.named_parameters())

    def initial_params(self) -> dict[str, torch.Tensor]:
        return {f"{self.name}.{n}": p.detach().clone() for n, p in self.module.named_parameters()}

    def apply(self, x, params, ctx):
        cut = len(self.name) + 1
        return functional_call(self.module, {k[cut:]: v for k, v in params.items()}, (x,))
