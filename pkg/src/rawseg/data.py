"""Synthetic driving scenes, PNG dataset I/O and the corruption suite."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from PIL import Image

from .diffcore import RunContext
from .losses import IGNORE
from .optics import PsfSynth, defocus_lens, render
from .sensor import NoiseParams, add_noise, quantize_ste

log = logging.getLogger(__name__)

ROAD, BUILDING, POLE, SIGN, SKY = range(5)
CLASS_NAMES = ("road", "building", "pole", "sign", "sky")


@dataclass
class SceneSpec:
    seed: int = 0
    H: int = 64
    W: int = 64
    buildings: tuple[int, int] = (2, 4)
    poles: tuple[int, int] = (1, 3)
    signs: tuple[int, int] = (1, 2)
    illumination: float | None = None  # None draws from [0.2, 1.0]

    @property
    def num_classes(self) -> int:
        return len(CLASS_NAMES)


def _validate(spec: SceneSpec) -> None:
    if spec.H < 32 or spec.W < 32:
        raise ValueError(f"scenes must be at least 32x32, got {spec.H}x{spec.W}")
    for lo, hi in (spec.buildings, spec.poles, spec.signs):
        if lo < 0 or hi < lo:
            raise ValueError("object count ranges must satisfy 0 <= lo <= hi")
    if spec.illumination is not None and not 0.2 <= spec.illumination <= 1.0:
        raise ValueError("illumination must lie in [0.2, 1.0]")


def generate_scene(spec: SceneSpec) -> tuple[torch.Tensor, torch.Tensor]:
    """Deterministic (radiance (3, H, W), labels (H, W)) pair drawn from ``spec.seed``."""
    _validate(spec)
    rng = np.random.default_rng(spec.seed)
    H, W = spec.H, spec.W
    img = np.zeros((H, W, 3))
    lab = np.full((H, W), SKY, dtype=np.int64)
    yy, xx = np.mgrid[0:H, 0:W]

    horizon = int(H * rng.uniform(0.35, 0.5))
    top, low = np.array([0.30, 0.50, 0.90]), np.array([0.70, 0.80, 0.95])
    t = np.clip(yy / max(horizon, 1), 0, 1)[..., None]
    img[:] = top * (1 - t) + low * t

    # ground outside the road reads as building frontage
    ground = yy >= horizon
    facade = np.array([0.45, 0.38, 0.32]) * rng.uniform(0.8, 1.2)
    img[ground] = facade
    lab[ground] = BUILDING

    for _ in range(rng.integers(spec.buildings[0], spec.buildings[1] + 1)):
        bw = int(rng.integers(W // 8, W // 4))
        x0 = int(rng.integers(0, W - bw))
        y0 = int(rng.integers(int(0.1 * H), max(int(0.1 * H) + 1, horizon - 3)))
        color = rng.uniform([0.35, 0.25, 0.2], [0.75, 0.6, 0.5])
        region = (xx >= x0) & (xx < x0 + bw) & (yy >= y0)
        img[region] = color
        lab[region] = BUILDING
        # windows: darker cells on a regular grid
        win = region & (((yy - y0) % 6) >= 3) & (((xx - x0) % 5) >= 3) & (yy < horizon)
        img[win] = color * 0.55

    cx = W * rng.uniform(0.35, 0.65)
    half_top = W * rng.uniform(0.04, 0.12)
    half_bot = W * rng.uniform(0.45, 0.75)
    frac = np.clip((yy - horizon) / max(H - 1 - horizon, 1), 0, 1)
    half = half_top + (half_bot - half_top) * frac
    road = ground & (np.abs(xx + 0.5 - cx) <= half)
    img[road] = np.array([0.28, 0.28, 0.30]) * rng.uniform(0.8, 1.2)
    lab[road] = ROAD
    lane = road & (np.abs(xx + 0.5 - cx) <= 0.6 + 0.02 * (yy - horizon)) & (((yy - horizon) // 4) % 2 == 0)
    img[lane] = 0.85

    pole_tops = []
    for _ in range(rng.integers(spec.poles[0], spec.poles[1] + 1)):
        pw = int(rng.integers(1, 3))
        x0 = int(rng.integers(2, W - 2 - pw))
        yb = int(rng.integers(horizon + 2, H - 2))
        yt = max(1, yb - int(rng.uniform(0.3, 0.55) * H))
        img[yt:yb, x0:x0 + pw] = rng.uniform(0.08, 0.2)
        lab[yt:yb, x0:x0 + pw] = POLE
        pole_tops.append((yt, x0 + pw / 2))

    sign_colors = np.array([[0.85, 0.10, 0.10], [0.90, 0.80, 0.10], [0.10, 0.30, 0.85]])
    for i in range(rng.integers(spec.signs[0], spec.signs[1] + 1)):
        r = rng.uniform(2.0, 4.0)
        if i < len(pole_tops):
            sy, sx = pole_tops[i]
        else:
            sy, sx = rng.uniform(0.2 * H, horizon), rng.uniform(4, W - 4)
        dy, dx = yy + 0.5 - sy, xx + 0.5 - sx
        shape = (dx ** 2 + dy ** 2 <= r * r) if rng.random() < 0.5 else (np.abs(dx) + np.abs(dy) <= r)
        img[shape] = sign_colors[rng.integers(0, 3)]
        lab[shape] = SIGN

    img = np.clip(img + rng.normal(0, 0.02, img.shape), 0, 1)
    illum = spec.illumination if spec.illumination is not None else rng.uniform(0.2, 1.0)
    img = img * illum
    return torch.from_numpy(img.transpose(2, 0, 1).copy()).float(), torch.from_numpy(lab)


def synthetic_dataset(n: int, seed: int = 0, H: int = 64, W: int = 64) -> list[tuple[torch.Tensor, torch.Tensor]]:
    """``n`` scenes with seeds drawn from one base seed."""
    seeds = np.random.SeedSequence(seed).generate_state(n) if n else []
    return [generate_scene(SceneSpec(seed=int(s), H=H, W=W)) for s in seeds]


# --------------------------------------------------------------------------- PNG I/O

def save_dataset(pairs: Sequence[tuple[torch.Tensor, torch.Tensor]], root: str | Path) -> None:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "labels").mkdir(parents=True, exist_ok=True)
    for i, (img, lab) in enumerate(pairs):
        arr = (img.clamp(0, 1).permute(1, 2, 0).numpy() * 255).round().astype(np.uint8)
        Image.fromarray(arr, "RGB").save(root / "images" / f"{i:05d}.png")
        Image.fromarray(lab.numpy().astype(np.uint8), "L").save(root / "labels" / f"{i:05d}.png")


def load_dataset(root: str | Path, num_classes: int = 19) -> list[tuple[torch.Tensor, torch.Tensor]]:
    """Filename-matched ``images/*.png`` (RGB) and ``labels/*.png`` (class ids, 255 ignored)."""
    root = Path(root)
    images = {p.stem: p for p in sorted((root / "images").glob("*.png"))}
    labels = {p.stem: p for p in sorted((root / "labels").glob("*.png"))}
    orphans = sorted(set(images) ^ set(labels))
    if orphans:
        raise ValueError(f"unmatched image/label files: {', '.join(orphans)}")
    if not images:
        log.warning("no image/label pairs under %s", root)
        return []
    out = []
    for stem in sorted(images):
        img = np.asarray(Image.open(images[stem]).convert("RGB"), dtype=np.float32) / 255.0
        lab = np.asarray(Image.open(labels[stem]), dtype=np.int64)
        if lab.ndim != 2:
            raise ValueError(f"label {stem}.png must be single-channel")
        if img.shape[:2] != lab.shape:
            raise ValueError(f"size mismatch for {stem}: image {img.shape[:2]}, label {lab.shape}")
        bad = (lab != IGNORE) & (lab >= num_classes)
        if bad.any():
            raise ValueError(f"label {stem}.png holds values {sorted(set(lab[bad].tolist()))} "
                             f"outside [0, {num_classes}) and != {IGNORE}")
        out.append((torch.from_numpy(img.transpose(2, 0, 1).copy()), torch.from_numpy(lab)))
    return out


# --------------------------------------------------------------------------- corruptions

CORRUPTIONS = ("blur", "noise", "bitdepth", "exposure_shift")


@dataclass
class CorruptionSpec:
    """``kind`` plus its severity.

    blur: defocus in waves; noise: (sigma_s, sigma_r); bitdepth: bits, 0 meaning
    off; exposure_shift: gain in stops (log2), so 0 is the identity.
    """

    kind: str
    severity: float | int | tuple[float, float]

    def __post_init__(self):
        if self.kind not in CORRUPTIONS:
            raise ValueError(f"unknown corruption {self.kind!r}; expected one of {CORRUPTIONS}")
        s = self.severity
        if self.kind == "blur" and not (isinstance(s, (int, float)) and 0 <= s <= 3):
            raise ValueError("blur severity must be a defocus in [0, 3] waves")
        if self.kind == "noise":
            if not (isinstance(s, (tuple, list)) and len(s) == 2 and min(s) >= 0):
                raise ValueError("noise severity must be a pair (sigma_s, sigma_r) >= 0")
        if self.kind == "bitdepth" and not (isinstance(s, int) and (s == 0 or 1 <= s <= 16)):
            raise ValueError("bitdepth severity must be 0 (off) or an integer in [1, 16]")
        if self.kind == "exposure_shift" and not (isinstance(s, (int, float)) and -8 <= s <= 8):
            raise ValueError("exposure_shift severity must be in [-8, 8] stops")


def corrupt(image: torch.Tensor, spec: CorruptionSpec, rng_key: tuple[int, int] = (0, 0)) -> torch.Tensor:
    """Apply one degradation to a (..., 3, H, W) radiance image."""
    s = spec.severity
    if spec.kind == "blur":
        if s == 0:
            return image
        lens = defocus_lens(float(s))
        synth = PsfSynth(lens.zernike.shape[-1], 64, 33, wavelengths=lens.wavelengths_nm)
        kernels = synth.forward(lens.zernike)[0].to(image.dtype)
        return render(image, kernels).clamp(0, 1)
    if spec.kind == "noise":
        return add_noise(image, NoiseParams(*s), RunContext(seed=rng_key[0], step=rng_key[1]), name="corrupt")
    if spec.kind == "bitdepth":
        if s == 0:
            return image
        # quantize per channel, then restore each channel's peak; dark channels pass through
        peak = image.amax(dim=(-2, -1), keepdim=True)
        lit = peak > 0
        levels = quantize_ste(torch.where(lit, image, torch.ones_like(image)), s)
        return torch.where(lit, levels * torch.where(lit, peak, torch.ones_like(peak)), image)
    return (image * 2.0 ** s).clamp(0, 1)
