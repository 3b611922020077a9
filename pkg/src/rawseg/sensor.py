"""Sensor front end: exposure gain, CFA mosaic, Poisson-Gaussian noise, quantizer."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .diffcore import RunContext, ShapeError, Stage

GAIN_MIN, GAIN_MAX = 0.25, 4.0
NOISE_FLOOR = 1e-8
SIGMA_S, SIGMA_R = 0.015, 0.002
# softplus logit used for a "zero" CFA response at init: small but still trainable
OFF_LOGIT = -8.0

LAYOUTS = ("BAYER_RGGB", "RCCC")


# --------------------------------------------------------------------------- exposure

def exposure_gain(gamma):
    g = torch.as_tensor(gamma, dtype=torch.float64)
    out = GAIN_MIN + (GAIN_MAX - GAIN_MIN) * torch.sigmoid(g)
    return out.item() if out.dim() == 0 else out


def gamma_for_gain(alpha: float) -> float:
    """Inverse of :func:`exposure_gain`."""
    if not GAIN_MIN < alpha < GAIN_MAX:
        raise ValueError(f"gain must lie in ({GAIN_MIN}, {GAIN_MAX})")
    s = (alpha - GAIN_MIN) / (GAIN_MAX - GAIN_MIN)
    return math.log(s / (1 - s))


def _exposure_forward(image, gamma):
    sig = torch.sigmoid(gamma)
    alpha = GAIN_MIN + (GAIN_MAX - GAIN_MIN) * sig
    scaled = alpha * image
    out = scaled.clamp(0.0, 1.0)
    return out, (image, sig, alpha, (scaled > 0) & (scaled < 1))


def apply_exposure(image: torch.Tensor, gamma) -> torch.Tensor:
    return _exposure_forward(image, torch.as_tensor(gamma, dtype=image.dtype))[0]


class ExposureStage(Stage):
    name = "exposure"
    param_names = ("sensor.gamma",)

    def forward(self, x, params, ctx):
        return _exposure_forward(x, params["sensor.gamma"])

    def backward(self, saved, g):
        image, sig, alpha, inside = saved
        g_in = g * inside
        d_alpha = (GAIN_MAX - GAIN_MIN) * sig * (1 - sig)
        g_gamma = (g_in * image).sum() * d_alpha
        return g_in * alpha, {"sensor.gamma": g_gamma.reshape(sig.shape)}


# --------------------------------------------------------------------------- CFA

def inverse_softplus(y: torch.Tensor) -> torch.Tensor:
    return torch.where(y > 0, torch.log(torch.expm1(y)), torch.full_like(y, -math.inf))


@dataclass
class CfaModel:
    """2x2-periodic colour filter array.

    ``layout[i][j]`` is the channel class at cell (i, j); ``logits[c]`` are the
    unbounded spectral-response parameters of class c (effective response is
    their softplus); ``select`` holds per-cell selection logits used only when
    ``soft_selection`` is on.
    """

    layout: torch.Tensor  # (2, 2) int64
    logits: torch.Tensor  # (n_classes, 3)
    select: torch.Tensor  # (2, 2, n_classes)
    tau: float = 1.0
    soft_selection: bool = False
    name: str = ""

    @property
    def responses(self) -> torch.Tensor:
        return F.softplus(self.logits)

    def cell_response(self, i: int, j: int) -> torch.Tensor:
        return self.responses[self.layout[i % 2, j % 2]]

    @classmethod
    def from_responses(cls, layout, responses, **kw) -> "CfaModel":
        """Build from effective (non-negative) responses; zeros stay exact zeros."""
        layout = torch.as_tensor(layout, dtype=torch.int64)
        responses = torch.as_tensor(responses, dtype=torch.float64)
        n = responses.shape[0]
        select = F.one_hot(layout, n).to(torch.float64)
        return cls(layout, inverse_softplus(responses), select, **kw)


def init_cfa(layout: str, soft_selection: bool = False, off_logit: float = OFF_LOGIT) -> CfaModel:
    if layout == "BAYER_RGGB":
        cells = [[0, 1], [1, 2]]
        resp = torch.eye(3, dtype=torch.float64)
    elif layout == "RCCC":
        cells = [[0, 1], [1, 1]]
        resp = torch.tensor([[1.0, 0.0, 0.0], [1 / 3, 1 / 3, 1 / 3]], dtype=torch.float64)
    else:
        raise ValueError(f"unknown CFA layout {layout!r}; expected one of {LAYOUTS}")
    lay = torch.tensor(cells, dtype=torch.int64)
    logits = torch.where(resp > 0, inverse_softplus(resp), torch.full_like(resp, off_logit))
    select = F.one_hot(lay, resp.shape[0]).to(torch.float64)
    return CfaModel(lay, logits, select, tau=1.0, soft_selection=soft_selection, name=layout)


def _cell_map(layout: torch.Tensor, H: int, W: int) -> torch.Tensor:
    return layout.repeat((H + 1) // 2, (W + 1) // 2)[:H, :W]


def _mosaic_forward(image, logits, select, layout, tau, soft):
    H, W = image.shape[-2:]
    resp = F.softplus(logits)
    # per-class raw signal: (..., n_classes, H, W)
    per_class = torch.einsum("...chw,kc->...khw", image, resp)
    if not soft:
        cmap = _cell_map(layout, H, W)
        onehot = F.one_hot(cmap, resp.shape[0]).permute(2, 0, 1).to(image.dtype)
        out = (per_class * onehot).sum(-3, keepdim=True)
        return out, (image, logits, resp, per_class, onehot, None)
    weights = torch.softmax(select / tau, dim=-1)  # (2, 2, n)
    wmap = weights.repeat((H + 1) // 2, (W + 1) // 2, 1)[:H, :W].permute(2, 0, 1).to(image.dtype)
    out = (per_class * wmap).sum(-3, keepdim=True)
    return out, (image, logits, resp, per_class, wmap, weights)


def mosaic(image: torch.Tensor, cfa: CfaModel, crop: bool = True) -> torch.Tensor:
    image = _even_crop(image, crop)
    return _mosaic_forward(image, cfa.logits.to(image.dtype), cfa.select.to(image.dtype), cfa.layout,
                           cfa.tau, cfa.soft_selection)[0]


def _even_crop(image, crop: bool):
    H, W = image.shape[-2:]
    if H % 2 or W % 2:
        if not crop:
            raise ShapeError(f"mosaic needs even dimensions, got {H}x{W}")
        warnings.warn(f"cropping {H}x{W} frame to even size before mosaicing")
        image = image[..., : H - H % 2, : W - W % 2]
    return image


class MosaicStage(Stage):
    name = "mosaic"
    param_names = ("sensor.cfa_logits", "sensor.cfa_select")

    def __init__(self, cfa: CfaModel, crop: bool = True):
        self.cfa = cfa
        self.crop = crop

    def forward(self, x, params, ctx):
        if x.dim() < 3 or x.shape[-3] != 3:
            raise ShapeError(f"mosaic expects a 3-channel image, got {tuple(x.shape)}")
        if x.shape[-2] % 2 or x.shape[-1] % 2:
            if not self.crop:
                raise ShapeError(f"mosaic needs even dimensions, got {tuple(x.shape[-2:])}")
        shape = x.shape
        x = _even_crop(x, self.crop)
        y, saved = _mosaic_forward(x, params["sensor.cfa_logits"], params["sensor.cfa_select"],
                                   self.cfa.layout, self.cfa.tau, self.cfa.soft_selection)
        return y, (shape, saved)

    def backward(self, saved, g):
        shape, (image, logits, resp, per_class, wmap, weights) = saved
        g_pc = g * wmap  # (..., n, H, W)
        g_image = torch.einsum("...khw,kc->...chw", g_pc, resp)
        g_resp = torch.einsum("...khw,...chw->kc", g_pc, image)
        g_logits = g_resp * torch.sigmoid(logits)
        g_select = torch.zeros_like(self.cfa.select, dtype=g.dtype)
        if weights is not None:
            H, W = image.shape[-2:]
            contrib = (g * per_class)  # (..., n, H, W)
            batch = tuple(range(contrib.dim() - 3))
            if batch:
                contrib = contrib.sum(dim=batch)
            g_w = torch.zeros_like(weights)
            for i in range(2):
                for j in range(2):
                    g_w[i, j] = contrib[:, i::2, j::2].sum(dim=(-2, -1))
            tau = self.cfa.tau
            g_select = weights * (g_w - (weights * g_w).sum(-1, keepdim=True)) / tau
        if g_image.shape != shape:
            # cropped rows/cols of an odd frame receive no gradient
            g_image = F.pad(g_image, (0, shape[-1] - g_image.shape[-1], 0, shape[-2] - g_image.shape[-2]))
        return g_image, {"sensor.cfa_logits": g_logits, "sensor.cfa_select": g_select}


class ChannelMeanStage(Stage):
    """Fixed panchromatic projection used when the CFA is ablated."""

    name = "channel_mean"

    def forward(self, x, params, ctx):
        if x.dim() < 3:
            raise ShapeError(f"channel_mean expects (..., C, H, W), got {tuple(x.shape)}")
        return x.mean(dim=-3, keepdim=True), x.shape[-3]

    def backward(self, saved, g):
        c = saved
        return (g / c).expand(*g.shape[:-3], c, *g.shape[-2:]).clone(), {}


# --------------------------------------------------------------------------- noise

@dataclass
class NoiseParams:
    sigma_s: float = SIGMA_S
    sigma_r: float = SIGMA_R

    def __post_init__(self):
        if self.sigma_s < 0 or self.sigma_r < 0:
            raise ValueError("noise standard deviations must be >= 0")


def _noise_forward(raw, sigma_s, sigma_r, eps1, eps2):
    if torch.any(sigma_s < 0) or torch.any(sigma_r < 0):
        raise ValueError("noise standard deviations must be >= 0")
    root = torch.sqrt(raw.clamp_min(NOISE_FLOOR))
    out = raw + sigma_s * root * eps1 + sigma_r * eps2
    return out, (raw, root, sigma_s, sigma_r, eps1, eps2)


def add_noise(raw: torch.Tensor, noise: NoiseParams, rng_key: tuple[int, int] | RunContext,
              name: str = "noise") -> torch.Tensor:
    """Poisson-Gaussian noise with reparameterized draws keyed by ``(seed, step)``."""
    ctx = rng_key if isinstance(rng_key, RunContext) else RunContext(seed=rng_key[0], step=rng_key[1])
    NoiseParams(noise.sigma_s, noise.sigma_r)
    eps1 = ctx.normal(name + ".shot", raw.shape, raw)
    eps2 = ctx.normal(name + ".read", raw.shape, raw)
    s = torch.tensor(noise.sigma_s, dtype=raw.dtype)
    r = torch.tensor(noise.sigma_r, dtype=raw.dtype)
    return _noise_forward(raw, s, r, eps1, eps2)[0]


class NoiseStage(Stage):
    name = "noise"
    param_names = ("sensor.sigma_s", "sensor.sigma_r")
    stochastic = True

    def forward(self, x, params, ctx):
        s, r = params["sensor.sigma_s"], params["sensor.sigma_r"]
        if ctx.seed is None:
            raise RuntimeError("noise stage needs a fixed seed")
        eps1 = ctx.normal(self.name + ".shot", x.shape, x)
        eps2 = ctx.normal(self.name + ".read", x.shape, x)
        return _noise_forward(x, s, r, eps1, eps2)

    def backward(self, saved, g):
        raw, root, s, r, eps1, eps2 = saved
        d_root = torch.where(raw > NOISE_FLOOR, 0.5 / root, torch.zeros_like(root))
        g_raw = g * (1 + s * eps1 * d_root)
        g_s = (g * root * eps1).sum().reshape(s.shape)
        g_r = (g * eps2).sum().reshape(r.shape)
        return g_raw, {"sensor.sigma_s": g_s, "sensor.sigma_r": g_r}


# --------------------------------------------------------------------------- quantizer

def _quantize_forward(raw, bits: int):
    if not 1 <= bits <= 16:
        raise ValueError(f"bits must lie in [1, 16], got {bits}")
    dims = (-2, -1) if raw.dim() >= 2 else (-1,)
    peak = raw.detach().amax(dim=dims, keepdim=True)
    if torch.any(peak <= 0):
        raise ValueError("cannot quantize a frame whose maximum is <= 0")
    levels = 2.0 ** bits
    return torch.floor(levels * raw / peak) / levels


def quantize_ste(raw: torch.Tensor, bits: int) -> torch.Tensor:
    """Frame-max normalized floor quantizer (forward only; see QuantizeStage for STE)."""
    return _quantize_forward(raw, bits)


class QuantizeStage(Stage):
    name = "quantize"
    ste = True

    def __init__(self, bits: int):
        if not 1 <= bits <= 16:
            raise ValueError(f"bits must lie in [1, 16], got {bits}")
        self.bits = bits

    def forward(self, x, params, ctx):
        return _quantize_forward(x, self.bits), None

    def backward(self, saved, g):
        return g, {}
