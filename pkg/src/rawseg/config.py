"""Run configuration: TOML file plus ``--set key=value`` overrides.

Layout (every block and key optional, defaults in brackets)::

    seed = 0                 epochs = 10           warmup_epochs = ceil(0.2*epochs)
    batch_size = 8           throttle = 0.1        steps_per_epoch = one pass
    tau_start = 1.0          tau_end = 0.05        lr = 2e-3   weight_decay = 1e-4
    data = "synthetic:64"    val_data = ""         eval_bits = 0 (0: use sensor.bits)
    val_every = 1 (validation pass every k epochs)

    [optics]   lens = "identity" | "defocus:<waves>" | builtin name | path to JSON
               pupil_samples = 64, kernel_size = 33
    [sensor]   exposure_gamma_init, cfa_layout, sigma_s, sigma_r, bits, soft_cfa_selection
    [network]  base_width, depth, num_classes, se_reduction, param_budget, group_norm
    [loss]     hard_fraction, min_kept, lambda_smooth, tau_w, adaptive, w_ohem, w_lovasz
    [switches] optics_on, normalize_on, exposure_on, cfa_on, noise_on, quant_on,
               optics_trainable, sensor_trainable, cfa_learnable, noise_trainable, eval_noise
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import tomli

from .losses import LossWeights, OhemConfig, SmoothnessConfig
from .optics import IDENTITY_LENS, LensError, builtin_lens, defocus_lens, load_lens
from .pipeline import PipelineConfig, TrainSchedule
from .segnet import SegNetConfig
from .sensor import LAYOUTS, NoiseParams, gamma_for_gain


class ConfigError(ValueError):
    pass


_TOP = {"seed": int, "epochs": int, "warmup_epochs": int, "batch_size": int, "throttle": float,
        "steps_per_epoch": int, "tau_start": float, "tau_end": float, "lr": float, "weight_decay": float,
        "val_every": int, "data": str, "val_data": str, "eval_bits": int}
_BLOCKS = {
    "optics": {"lens": str, "pupil_samples": int, "kernel_size": int},
    "sensor": {"exposure_gamma_init": float, "cfa_layout": str, "sigma_s": float, "sigma_r": float,
               "bits": int, "soft_cfa_selection": bool},
    "network": {"base_width": int, "depth": int, "num_classes": int, "se_reduction": int,
                "param_budget": int, "group_norm": bool},
    "loss": {"hard_fraction": float, "min_kept": int, "lambda_smooth": float, "tau_w": float,
             "adaptive": bool, "w_ohem": float, "w_lovasz": float},
    "switches": {k: bool for k in ("optics_on", "normalize_on", "exposure_on", "cfa_on", "noise_on",
                                   "quant_on", "optics_trainable", "sensor_trainable", "cfa_learnable",
                                   "noise_trainable", "eval_noise")},
}
PRESETS = ("fixed_sensor", "no_optics", "full_codesign")


@dataclass
class RunConfig:
    pipeline: PipelineConfig
    schedule: TrainSchedule
    data: str
    val_data: str
    eval_bits: int
    raw: dict


def _check_type(path: str, value, kind):
    if kind is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if (kind is int and isinstance(value, bool)) or not isinstance(value, kind):
        raise ConfigError(f"{path}: expected {kind.__name__}, got {value!r}")
    return value


def validate(raw: dict) -> dict:
    """Type-check a raw config mapping; unknown keys are rejected by path."""
    out = {}
    for key, value in raw.items():
        if key in _BLOCKS:
            if not isinstance(value, dict):
                raise ConfigError(f"{key}: expected a table")
            out[key] = {}
            for sub, v in value.items():
                if sub not in _BLOCKS[key]:
                    raise ConfigError(f"unknown config key '{key}.{sub}'")
                out[key][sub] = _check_type(f"{key}.{sub}", v, _BLOCKS[key][sub])
        elif key in _TOP:
            out[key] = _check_type(key, value, _TOP[key])
        else:
            raise ConfigError(f"unknown config key '{key}'")
    return out


def _parse_value(text: str):
    try:
        return tomli.loads(f"v = {text}")["v"]
    except tomli.TOMLDecodeError:
        return text


def apply_override(raw: dict, assignment: str) -> None:
    """``key=value`` or ``block.key=value``; a bare key is looked up in every block."""
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} is not of the form key=value")
    key, text = (s.strip() for s in assignment.split("=", 1))
    value = _parse_value(text)
    if "." in key:
        block, sub = key.split(".", 1)
        if block not in _BLOCKS or sub not in _BLOCKS[block]:
            raise ConfigError(f"unknown config key '{key}'")
        raw.setdefault(block, {})[sub] = value
        return
    if key in _TOP:
        raw[key] = value
        return
    owners = [b for b, keys in _BLOCKS.items() if key in keys]
    if len(owners) != 1:
        raise ConfigError(f"unknown config key '{key}'")
    raw.setdefault(owners[0], {})[key] = value


def read_raw(path: str | Path | None = None, preset: str | None = None) -> dict:
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; expected one of {PRESETS}")
        text = resources.files("rawseg.presets").joinpath(f"{preset}.toml").read_text()
    elif path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        text = p.read_text()
    else:
        return {}
    try:
        return tomli.loads(text)
    except tomli.TOMLDecodeError as e:
        raise ConfigError(f"cannot parse config: {e}") from e


def resolve_lens(spec: str):
    if spec in ("", "identity", "none"):
        return IDENTITY_LENS
    if spec.startswith("defocus:"):
        try:
            return defocus_lens(float(spec.split(":", 1)[1]))
        except ValueError as e:
            raise ConfigError(f"optics.lens: bad defocus spec {spec!r}") from e
    try:
        if spec.endswith(".json") or "/" in spec:
            p = Path(spec)
            if not p.is_file():
                raise ConfigError(f"optics.lens: file not found: {spec}")
            return load_lens(p.read_text(), name=p.stem)
        return builtin_lens(spec)
    except FileNotFoundError as e:
        raise ConfigError(f"optics.lens: unknown lens {spec!r}") from e
    except LensError as e:
        raise ConfigError(f"optics.lens: {e}") from e


def build_run_config(raw: dict) -> RunConfig:
    raw = validate(copy.deepcopy(raw))
    o, s, n, lo, sw = (raw.get(b, {}) for b in ("optics", "sensor", "network", "loss", "switches"))
    try:
        if s.get("cfa_layout", "BAYER_RGGB") not in LAYOUTS:
            raise ConfigError(f"sensor.cfa_layout: expected one of {LAYOUTS}")
        net = SegNetConfig(**{k: n[k] for k in n})
        pipe = PipelineConfig(
            lens=resolve_lens(o.get("lens", "identity")),
            pupil_samples=o.get("pupil_samples", 64), kernel_size=o.get("kernel_size", 33),
            exposure_gamma_init=s.get("exposure_gamma_init", gamma_for_gain(1.0)),
            cfa_layout=s.get("cfa_layout", "BAYER_RGGB"),
            soft_cfa_selection=s.get("soft_cfa_selection", False),
            noise=NoiseParams(s.get("sigma_s", 0.015), s.get("sigma_r", 0.002)),
            bits=s.get("bits", 10), net=net,
            weights=LossWeights(lo.get("w_ohem", 0.6), lo.get("w_lovasz", 0.4), lo.get("lambda_smooth", 0.1),
                                lo.get("adaptive", False)),
            ohem=OhemConfig(lo.get("hard_fraction", 0.25), lo.get("min_kept", 1024)),
            smooth=SmoothnessConfig(lo.get("tau_w", 0.1)),
            **sw)
        epochs = raw.get("epochs", 10)
        sched = TrainSchedule(
            total_epochs=epochs, warmup_epochs=raw.get("warmup_epochs"),
            steps_per_epoch=raw.get("steps_per_epoch"), batch_size=raw.get("batch_size", 8),
            tau_start=raw.get("tau_start", 1.0), tau_end=raw.get("tau_end", 0.05),
            throttle=raw.get("throttle", 0.1), seed=raw.get("seed", 0),
            lr=raw.get("lr", 2e-3), weight_decay=raw.get("weight_decay", 1e-4),
            val_every=raw.get("val_every", 1))
    except ConfigError:
        raise
    except (ValueError, TypeError) as e:
        raise ConfigError(str(e)) from e
    eval_bits = raw.get("eval_bits", 0)
    if eval_bits and not 1 <= eval_bits <= 16:
        raise ConfigError("eval_bits must be 0 or lie in [1, 16]")
    if not all(math.isfinite(v) for v in (sched.throttle, sched.lr)):
        raise ConfigError("throttle and lr must be finite")
    return RunConfig(pipe, sched, raw.get("data", "synthetic:64"), raw.get("val_data", ""), eval_bits, raw)


def load_run_config(path=None, overrides=(), preset=None) -> RunConfig:
    raw = read_raw(path, preset)
    for o in overrides:
        apply_override(raw, o)
    return build_run_config(raw)


def to_toml(raw: dict) -> str:
    """Minimal TOML writer for validated configs (scalars and one level of tables)."""

    def fmt(v):
        if isinstance(v, bool):
            return "true" if v else "false"
        if isinstance(v, str):
            return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
        return repr(v)

    lines = [f"{k} = {fmt(v)}" for k, v in raw.items() if not isinstance(v, dict)]
    for k, v in raw.items():
        if isinstance(v, dict):
            lines += ["", f"[{k}]"] + [f"{kk} = {fmt(vv)}" for kk, vv in v.items()]
    return "\n".join(lines) + "\n"


__all__ = ["ConfigError", "PRESETS", "RunConfig", "apply_override", "build_run_config",
           "load_run_config", "read_raw", "resolve_lens", "to_toml", "validate"]
