"""Lens model: Zernike wavefront -> pupil -> PSF grid -> tiled FFT convolution.

PSFs are sampled with one pixel per ``lambda_ref * N``: the pupil disk is
inscribed in the ``pupil_samples`` DFT grid, which puts the diffraction-limited
core inside a single pixel and lets a one-wave defocus spread over most of a
33-pixel kernel.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from importlib import resources

import numpy as np
import torch

from .diffcore import RunContext, ShapeError, Stage

DEFAULT_WAVELENGTHS = (610.0, 530.0, 465.0)
REFERENCE_WAVELENGTH = 530.0
MAX_NOLL = 15
EPS_FLOOR = 1e-6


# --------------------------------------------------------------------------- zernike

def noll_to_nm(j: int) -> tuple[int, int]:
    """Noll index -> (radial order n, signed azimuthal frequency m)."""
    if j < 1:
        raise ValueError(f"Noll index must be >= 1, got {j}")
    n = 0
    j1 = j - 1
    while j1 > n:
        n += 1
        j1 -= n
    m = (n % 2) + 2 * ((j1 + ((n + 1) % 2)) // 2)
    return n, (m if j % 2 == 0 else -m)


def _radial(n: int, m: int, rho):
    out = 0.0
    for s in range((n - m) // 2 + 1):
        c = (-1) ** s * math.factorial(n - s) / (
            math.factorial(s) * math.factorial((n + m) // 2 - s) * math.factorial((n - m) // 2 - s))
        out = out + c * rho ** (n - 2 * s)
    return out


def zernike_eval(noll_index: int, rho, phi):
    """Noll-normalized Zernike polynomial (unit RMS over the unit disk)."""
    rho_arr = np.asarray(rho, dtype=float)
    if np.any(rho_arr < 0) or np.any(rho_arr > 1):
        raise ValueError("rho must lie in [0, 1]")
    n, m = noll_to_nm(noll_index)
    r = _radial(n, abs(m), rho_arr) * np.ones_like(rho_arr)
    if m == 0:
        out = math.sqrt(n + 1) * r
    elif m > 0:
        out = math.sqrt(2 * (n + 1)) * r * np.cos(m * np.asarray(phi, dtype=float))
    else:
        out = math.sqrt(2 * (n + 1)) * r * np.sin(-m * np.asarray(phi, dtype=float))
    return float(out) if np.ndim(out) == 0 else out


def pupil_basis(n_terms: int, pupil_samples: int, dtype=torch.float64):
    """Zernike modes 1..n_terms sampled on the pupil grid, zero outside the disk."""
    c = (pupil_samples - 1) / 2.0
    yy, xx = np.mgrid[0:pupil_samples, 0:pupil_samples].astype(float) - c
    rho = np.hypot(xx, yy) / (pupil_samples / 2.0)
    phi = np.arctan2(yy, xx)
    inside = rho <= 1.0
    basis = np.zeros((n_terms, pupil_samples, pupil_samples))
    for j in range(1, n_terms + 1):
        basis[j - 1][inside] = zernike_eval(j, rho[inside], phi[inside])
    return torch.from_numpy(basis).to(dtype), torch.from_numpy(inside.astype(float)).to(dtype)


# --------------------------------------------------------------------------- PSF synthesis

class PsfSynth:
    """Differentiable map from Zernike coefficients to normalized PSF kernels.

    Coefficients of shape (..., J) in waves at the reference wavelength give
    kernels of shape (..., L, k, k), one per wavelength.
    """

    def __init__(self, n_terms: int, pupil_samples: int = 64, kernel_size: int = 21,
                 wavelengths=DEFAULT_WAVELENGTHS, dtype=torch.float64):
        if kernel_size % 2 == 0:
            raise ValueError("kernel_size must be odd")
        if pupil_samples < kernel_size:
            raise ValueError("pupil_samples must be >= kernel_size")
        self.n_terms = n_terms
        self.N = pupil_samples
        self.k = kernel_size
        self.basis, self.aperture = pupil_basis(n_terms, pupil_samples, dtype)
        if float(self.aperture.sum()) == 0.0:
            raise ValueError("empty pupil")
        self.scales = torch.tensor([REFERENCE_WAVELENGTH / w for w in wavelengths], dtype=dtype)
        r = kernel_size // 2
        self.crop = torch.arange(-r, r + 1) % pupil_samples

    def to(self, dtype) -> "PsfSynth":
        self.basis = self.basis.to(dtype)
        self.aperture = self.aperture.to(dtype)
        self.scales = self.scales.to(dtype)
        return self

    def forward(self, coeffs: torch.Tensor):
        if coeffs.shape[-1] != self.n_terms:
            raise ShapeError(f"expected {self.n_terms} Zernike terms, got {coeffs.shape[-1]}")
        basis = self.basis.to(coeffs.dtype)
        wave = torch.einsum("...j,jxy->...xy", coeffs, basis)
        phase = 2 * math.pi * wave.unsqueeze(-3) * self.scales.to(coeffs.dtype)[:, None, None]
        pupil = self.aperture.to(coeffs.dtype) * torch.exp(1j * phase)
        field = torch.fft.fft2(pupil)
        intensity = field.real ** 2 + field.imag ** 2
        cropped = intensity[..., self.crop, :][..., self.crop]
        total = cropped.sum(dim=(-2, -1), keepdim=True)
        if not torch.all(total > 0):
            raise FloatingPointError("PSF with zero energy")
        kernel = cropped / total
        return kernel, (coeffs, pupil, field, kernel, total)

    def backward(self, saved, g_kernel: torch.Tensor) -> torch.Tensor:
        coeffs, pupil, field, kernel, total = saved
        g_crop = (g_kernel - (g_kernel * kernel).sum(dim=(-2, -1), keepdim=True)) / total
        g_int = torch.zeros(field.shape, dtype=g_crop.dtype)
        rows = self.crop[:, None]
        cols = self.crop[None, :]
        g_int[..., rows, cols] = g_crop
        g_field = 2 * g_int * field
        g_pupil = torch.fft.ifft2(g_field) * (self.N * self.N)
        g_phase = -(pupil * g_pupil.conj()).imag
        g_wave = 2 * math.pi * (g_phase * self.scales.to(g_phase.dtype)[:, None, None]).sum(-3)
        return torch.einsum("...xy,jxy->...j", g_wave, self.basis.to(g_wave.dtype))


def synthesize_psf(coeffs, pupil_samples: int = 64, kernel_size: int = 21) -> torch.Tensor:
    """Single-wavelength PSF kernel (k, k) for a coefficient vector in waves."""
    coeffs = torch.as_tensor(coeffs, dtype=torch.float64)
    synth = PsfSynth(coeffs.shape[-1], pupil_samples, kernel_size, wavelengths=(REFERENCE_WAVELENGTH,))
    kernel, _ = synth.forward(coeffs)
    return kernel[..., 0, :, :]


# --------------------------------------------------------------------------- render

def _reflect_index(n: int, r: int) -> torch.Tensor:
    idx = torch.arange(-r, n + r)
    if n == 1:
        return torch.zeros_like(idx)
    period = 2 * (n - 1)
    idx = idx % period
    return torch.where(idx >= n, period - idx, idx)


def tile_edges(n: int, tiles: int) -> list[int]:
    return [int(v) for v in np.linspace(0, n, tiles + 1).round()]


def _check_render(image: torch.Tensor, kernels: torch.Tensor):
    if kernels.dim() != 5:
        raise ShapeError(f"PSF grid must be (Gy, Gx, C, k, k), got {tuple(kernels.shape)}")
    gy, gx, kc, k, k2 = kernels.shape
    if k != k2 or k % 2 == 0:
        raise ShapeError("PSF kernels must be square with odd size")
    if kc not in (1, image.shape[-3]):
        raise ShapeError(f"PSF grid has {kc} channels, image has {image.shape[-3]}")
    if gy > image.shape[-2] or gx > image.shape[-1]:
        raise ShapeError(f"tiling {gy}x{gx} does not fit image {tuple(image.shape[-2:])}")


def render_forward(image: torch.Tensor, kernels: torch.Tensor):
    """Tiled convolution with reflect padding. image (..., C, H, W)."""
    _check_render(image, kernels)
    gy, gx, _, k, _ = kernels.shape
    r = k // 2
    H, W = image.shape[-2:]
    ri, ci = _reflect_index(H, r), _reflect_index(W, r)
    padded = image[..., ri, :][..., ci]
    size = padded.shape[-2:]
    spec = torch.fft.rfft2(padded, s=size)
    out = torch.empty_like(image)
    ye, xe = tile_edges(H, gy), tile_edges(W, gx)
    kspecs = {}
    for ty in range(gy):
        for tx in range(gx):
            kspec = torch.fft.rfft2(kernels[ty, tx].to(image.dtype), s=size)
            kspecs[ty, tx] = kspec
            full = torch.fft.irfft2(spec * kspec, s=size)
            out[..., ye[ty]:ye[ty + 1], xe[tx]:xe[tx + 1]] = \
                full[..., 2 * r + ye[ty]:2 * r + ye[ty + 1], 2 * r + xe[tx]:2 * r + xe[tx + 1]]
    return out, (image.shape, kernels.shape, ri, ci, spec, kspecs, size)


def render_backward(saved, g: torch.Tensor):
    shape, kshape, ri, ci, spec, kspecs, size = saved
    gy, gx, kc, k, _ = kshape
    r = k // 2
    H, W = shape[-2:]
    ye, xe = tile_edges(H, gy), tile_edges(W, gx)
    g_padded_spec = 0
    g_kernels = torch.zeros(kshape, dtype=g.dtype)
    batch_dims = tuple(range(g.dim() - 3))
    for ty in range(gy):
        for tx in range(gx):
            placed = torch.zeros(shape[:-2] + tuple(size), dtype=g.dtype)
            placed[..., 2 * r + ye[ty]:2 * r + ye[ty + 1], 2 * r + xe[tx]:2 * r + xe[tx + 1]] = \
                g[..., ye[ty]:ye[ty + 1], xe[tx]:xe[tx + 1]]
            gspec = torch.fft.rfft2(placed, s=size)
            g_padded_spec = g_padded_spec + gspec * kspecs[ty, tx].conj()
            corr = torch.fft.irfft2(gspec * spec.conj(), s=size)[..., :k, :k]
            if batch_dims:
                corr = corr.sum(dim=batch_dims)
            if kc == 1:
                corr = corr.sum(dim=0, keepdim=True)
            g_kernels[ty, tx] = corr
    g_padded = torch.fft.irfft2(g_padded_spec, s=size)
    g_rows = torch.zeros(g_padded.shape[:-1] + (W,), dtype=g.dtype).index_add_(-1, ci, g_padded)
    g_image = torch.zeros(shape, dtype=g.dtype).index_add_(-2, ri, g_rows)
    return g_image, g_kernels


def render(image: torch.Tensor, grid: torch.Tensor | None) -> torch.Tensor:
    """Convolve each tile of ``image`` with its PSF; ``None`` is the identity lens."""
    if grid is None:
        return image
    return render_forward(image, grid)[0]


def normalize_render(image: torch.Tensor) -> torch.Tensor:
    return _normalize_forward(image)[0]


def _normalize_forward(image: torch.Tensor):
    mean = image.mean(dim=(-3, -2, -1), keepdim=True)
    if torch.any(mean <= EPS_FLOOR):
        raise ValueError(f"cannot normalize a frame with mean <= {EPS_FLOOR} (black frame)")
    return image * (0.5 / mean), (image, mean)


# --------------------------------------------------------------------------- lens files

@dataclass
class LensParams:
    focal_length_mm: float = 0.0
    f_number: float = 0.0
    fov_deg: float = 0.0
    wavelengths_nm: tuple[float, ...] = DEFAULT_WAVELENGTHS
    zernike: torch.Tensor | None = None  # (Gy, Gx, J) in waves; None -> identity optics
    trainable: bool = True
    name: str = ""
    extras: dict = field(default_factory=dict)

    @property
    def is_identity(self) -> bool:
        return self.zernike is None

    @property
    def grid(self) -> tuple[int, int]:
        return (1, 1) if self.zernike is None else tuple(self.zernike.shape[:2])

    def to_json(self) -> str:
        if self.is_identity:
            return "{}"
        gy, gx, J = self.zernike.shape
        return json.dumps({
            "focal_length_mm": self.focal_length_mm, "f_number": self.f_number, "fov_deg": self.fov_deg,
            "wavelengths_nm": list(self.wavelengths_nm),
            "zernike": {"grid": [gy, gx], "noll_max": J,
                        "coeffs_waves": self.zernike.reshape(gy * gx, J).tolist()},
            "trainable": self.trainable,
        }, indent=2)


IDENTITY_LENS = LensParams()

_LENS_KEYS = {"focal_length_mm", "f_number", "fov_deg", "wavelengths_nm", "zernike", "trainable"}
_ZERNIKE_KEYS = {"grid", "noll_max", "coeffs_waves"}


class LensError(ValueError):
    pass


def _number(d: dict, key: str, where: str = "") -> float:
    if key not in d:
        raise LensError(f"missing lens field {where}{key!r}")
    v = d[key]
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise LensError(f"lens field {where}{key!r} must be a number, got {v!r}")
    return float(v)


def load_lens(json_text: str | None, name: str = "") -> LensParams:
    """Parse and validate a lens description; empty input gives the identity lens."""
    if json_text is None or not json_text.strip():
        return IDENTITY_LENS
    try:
        d = json.loads(json_text)
    except json.JSONDecodeError as e:
        raise LensError(f"lens file is not valid JSON: {e}") from e
    if not isinstance(d, dict):
        raise LensError("lens file must hold a JSON object")
    if not d:
        return IDENTITY_LENS
    for key in sorted(set(d) - _LENS_KEYS):
        warnings.warn(f"ignoring unknown lens key {key!r}")
    focal = _number(d, "focal_length_mm")
    fnum = _number(d, "f_number")
    fov = _number(d, "fov_deg")
    if focal <= 0:
        raise LensError(f"'focal_length_mm' must be > 0, got {focal}")
    if fnum <= 0:
        raise LensError(f"'f_number' must be > 0, got {fnum}")
    if not 0 < fov < 180:
        raise LensError(f"'fov_deg' must lie in (0, 180), got {fov}")
    wl = d.get("wavelengths_nm", list(DEFAULT_WAVELENGTHS))
    if not isinstance(wl, list) or not wl or not all(
            isinstance(w, (int, float)) and not isinstance(w, bool) and w > 0 for w in wl):
        raise LensError("'wavelengths_nm' must be a non-empty list of positive numbers")
    trainable = d.get("trainable", True)
    if not isinstance(trainable, bool):
        raise LensError("'trainable' must be a boolean")
    if "zernike" not in d:
        raise LensError("missing lens field 'zernike'")
    z = d["zernike"]
    if not isinstance(z, dict):
        raise LensError("'zernike' must be an object")
    for key in sorted(set(z) - _ZERNIKE_KEYS):
        warnings.warn(f"ignoring unknown lens key 'zernike.{key}'")
    for key in ("grid", "noll_max", "coeffs_waves"):
        if key not in z:
            raise LensError(f"missing lens field 'zernike.{key}'")
    grid = z["grid"]
    if (not isinstance(grid, list) or len(grid) != 2
            or not all(isinstance(g, int) and not isinstance(g, bool) and g >= 1 for g in grid)):
        raise LensError("'zernike.grid' must be [Gy, Gx] with positive integers")
    J = z["noll_max"]
    if not isinstance(J, int) or isinstance(J, bool) or not 1 <= J <= MAX_NOLL:
        raise LensError(f"'zernike.noll_max' must be an integer in [1, {MAX_NOLL}]")
    coeffs = z["coeffs_waves"]
    if not isinstance(coeffs, list) or len(coeffs) != grid[0] * grid[1]:
        raise LensError(f"'zernike.coeffs_waves' must hold Gy*Gx = {grid[0] * grid[1]} vectors")
    for vec in coeffs:
        if (not isinstance(vec, list) or len(vec) != J
                or not all(isinstance(c, (int, float)) and not isinstance(c, bool) for c in vec)):
            raise LensError(f"every 'zernike.coeffs_waves' entry must be a list of {J} numbers")
    zern = torch.tensor(coeffs, dtype=torch.float64).reshape(grid[0], grid[1], J)
    return LensParams(focal, fnum, fov, tuple(float(w) for w in wl), zern, trainable, name)


def builtin_lens(name: str) -> LensParams:
    """Load one of the shipped lens files (``cellphone_68`` or ``cellphone_80``).

    Their coefficients are illustrative placeholders of plausible phone-lens
    size, not measurements of any real lens.
    """
    text = resources.files("rawseg.lenses").joinpath(f"{name}.json").read_text()
    return load_lens(text, name=name)


def defocus_lens(waves: float, n_terms: int = 6, grid: tuple[int, int] = (1, 1),
                 trainable: bool = True) -> LensParams:
    """Aberration-free lens plus ``waves`` of Noll defocus at every field position."""
    z = torch.zeros(grid + (n_terms,), dtype=torch.float64)
    z[..., 3] = waves
    return LensParams(4.0, 2.0, 68.0, DEFAULT_WAVELENGTHS, z, trainable, name=f"defocus_{waves:g}")


# --------------------------------------------------------------------------- stages

class OpticsStage(Stage):
    """Lens stage: PSF synthesis from ``optics.zernike`` followed by the tiled render."""

    name = "optics"

    def __init__(self, lens: LensParams, pupil_samples: int = 64, kernel_size: int = 21):
        self.lens = lens
        if lens.is_identity:
            self.param_names = ()
            self.synth = None
        else:
            self.param_names = ("optics.zernike",)
            self.synth = PsfSynth(lens.zernike.shape[-1], pupil_samples, kernel_size, lens.wavelengths_nm)

    def kernels(self, params) -> torch.Tensor | None:
        if self.synth is None:
            return None
        return self.synth.forward(params["optics.zernike"])[0]

    def forward(self, x, params, ctx: RunContext):
        if self.synth is None:
            return x, None
        if x.dim() < 3 or x.shape[-3] != len(self.lens.wavelengths_nm):
            raise ShapeError(f"optics expects {len(self.lens.wavelengths_nm)} channels, got {tuple(x.shape)}")
        kernels, psf_saved = self.synth.forward(params["optics.zernike"])
        y, r_saved = render_forward(x, kernels)
        return y, (psf_saved, r_saved)

    def backward(self, saved, g):
        if saved is None:
            return g, {}
        psf_saved, r_saved = saved
        g_x, g_k = render_backward(r_saved, g)
        g_z = self.synth.backward(psf_saved, g_k.to(psf_saved[0].dtype))
        return g_x, {"optics.zernike": g_z}


class NormalizeStage(Stage):
    """Rescales each frame to mean 0.5."""

    name = "normalize"

    def forward(self, x, params, ctx):
        return _normalize_forward(x)

    def backward(self, saved, g):
        x, mean = saved
        n = x[0].numel() if x.dim() > 3 else x.numel()
        scale = 0.5 / mean
        dot = (g * x).sum(dim=(-3, -2, -1), keepdim=True)
        return g * scale - dot * scale / (mean * n), {}
