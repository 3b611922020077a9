"""Command-line entry point: ``rawseg <command> ...``.

Exit codes: 0 success, 2 configuration or input error, 3 numeric abort,
4 gradient-check failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .config import ConfigError, RunConfig, load_run_config, to_toml
from .data import CLASS_NAMES, CORRUPTIONS, CorruptionSpec, corrupt, load_dataset, save_dataset, synthetic_dataset
from .diffcore import NumericFailure, load_checkpoint
from .metrics import write_report
from .pipeline import TrainingAborted, evaluate, forward_pipeline, init_params, train
from .registry import REGISTRY, run_suite

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_GRADCHECK = 0, 2, 3, 4
log = logging.getLogger("rawseg")

# class colours for label renders (synthetic palette first, then a fixed spread)
_PALETTE = np.array([[128, 64, 128], [70, 70, 70], [153, 153, 153], [220, 220, 0], [70, 130, 180]]
                    + [[(37 * i) % 256, (91 * i) % 256, (151 * i) % 256] for i in range(5, 256)], dtype=np.uint8)


def resolve_data(spec: str, num_classes: int):
    """``synthetic:<n>[:<seed>]`` or a dataset directory."""
    if spec.startswith("synthetic:"):
        parts = spec.split(":")
        try:
            n = int(parts[1])
            seed = int(parts[2]) if len(parts) > 2 else 0
        except (IndexError, ValueError) as e:
            raise ConfigError(f"bad synthetic data spec {spec!r}; expected synthetic:<n>[:<seed>]") from e
        if n < 1:
            raise ConfigError("synthetic data needs at least one scene")
        return synthetic_dataset(n, seed)
    root = Path(spec)
    if not root.is_dir():
        raise ConfigError(f"dataset directory not found: {root}")
    try:
        data = load_dataset(root, num_classes)
    except ValueError as e:
        raise ConfigError(str(e)) from e
    if not data:
        raise ConfigError(f"dataset {root} is empty")
    return data


def _run_config(args) -> RunConfig:
    overrides = list(args.set or [])
    for flag, key in (("epochs", "epochs"), ("seed", "seed"), ("data", "data"), ("val_data", "val_data")):
        v = getattr(args, flag, None)
        if v is not None:
            overrides.append(f"{key}={json.dumps(v)}")
    return load_run_config(args.config, overrides, args.preset)


def _load_params(path: str, rc: RunConfig):
    manifest = Path(str(path) + ".manifest")
    if not manifest.is_file():
        raise ConfigError(f"checkpoint not found: {path}")
    params, _, meta = load_checkpoint(path)
    expected = init_params(rc.pipeline, 0)
    if list(params) != list(expected):
        missing = sorted(set(expected) ^ set(params))
        raise ConfigError(f"checkpoint does not match the config (parameters differ: {', '.join(missing[:6])})")
    for k in params:
        if params[k].value.shape != expected[k].value.shape:
            raise ConfigError(f"checkpoint tensor {k} has shape {tuple(params[k].value.shape)}, "
                              f"config expects {tuple(expected[k].value.shape)}")
    return params, meta


def _names(C: int):
    return list(CLASS_NAMES) if C == len(CLASS_NAMES) else [str(c) for c in range(C)]


def cmd_train(args) -> int:
    rc = _run_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    C = rc.pipeline.net.num_classes
    data = resolve_data(rc.data, C)
    val = resolve_data(rc.val_data, C) if rc.val_data else None
    (out / "config.toml").write_text(to_toml(rc.raw))
    result = train(data, rc.pipeline, rc.schedule, val_set=val, out_dir=out)
    report = evaluate(result.params, val if val is not None else data, rc.pipeline, rc.eval_bits or None)
    write_report(out, report["confusion"], _names(C))
    summary = {"epochs": rc.schedule.total_epochs, "warmup_epochs": rc.schedule.warmup_epochs,
               "final_checkpoint": str(result.checkpoints[-1].relative_to(out)),
               "miou": report["miou"], "pixel_acc": report["pixel_acc"],
               "parameters": {g: result.params.num_elements(g) for g in ("optics", "sensor", "network")}}
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(f"trained {rc.schedule.total_epochs} epochs: mIoU {report['miou']:.4f}, "
          f"pixel acc {report['pixel_acc']:.4f} -> {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    rc = _run_config(args)
    params, _ = _load_params(args.checkpoint, rc)
    data = resolve_data(rc.data, rc.pipeline.net.num_classes)
    bits = args.bits or rc.eval_bits or None
    report = evaluate(params, data, rc.pipeline, bits)
    out = Path(args.out)
    write_report(out, report["confusion"], _names(rc.pipeline.net.num_classes))
    (out / "report.json").write_text(json.dumps(
        {"miou": report["miou"], "pixel_acc": report["pixel_acc"],
         "per_class_iou": [None if np.isnan(v) else v for v in report["per_class_iou"]],
         "confusion": report["confusion"].tolist(), "bits": bits or rc.pipeline.bits}, indent=2) + "\n")
    print(f"mIoU {report['miou']:.4f}  pixel acc {report['pixel_acc']:.4f}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    names = args.stages or list(REGISTRY)
    unknown = [n for n in names if n not in REGISTRY]
    if unknown:
        raise ConfigError(f"unknown stage(s) {', '.join(unknown)}; registered: {', '.join(REGISTRY)}")
    reports, seconds = run_suite(names, range(args.seeds), args.tol)
    print(f"{'stage':<18}{'mode':<6}{'max rel err':>13}  result")
    failed = 0
    for name, r in reports.items():
        failed += not r.passed
        print(f"{name:<18}{r.mode:<6}{r.max_error:>13.3e}  {'PASS' if r.passed else 'FAIL'}")
    print(f"{len(reports) - failed}/{len(reports)} stages pass ({args.seeds} seeds, tol {args.tol:g}, "
          f"{seconds:.1f}s)")
    return EXIT_GRADCHECK if failed else EXIT_OK


def _to_png(t: torch.Tensor) -> Image.Image:
    a = t.detach().double().cpu()
    if a.dim() == 3 and a.shape[0] == 1:
        a = a[0]
    if a.dim() == 3:
        arr = (a.clamp(0, 1).permute(1, 2, 0).numpy() * 255).round().astype(np.uint8)
        return Image.fromarray(arr, "RGB")
    peak = float(a.max()) or 1.0
    return Image.fromarray((a.clamp(0, None) / peak * 255).round().numpy().astype(np.uint8), "L")


def cmd_render(args) -> int:
    rc = _run_config(args)
    if args.checkpoint:
        params, _ = _load_params(args.checkpoint, rc)
    else:
        params = init_params(rc.pipeline, rc.schedule.seed)
    if args.image.startswith("synthetic:"):
        image = synthetic_dataset(1, int(args.image.split(":", 1)[1]))[0][0]
    else:
        p = Path(args.image)
        if not p.is_file():
            raise ConfigError(f"image not found: {p}")
        image = torch.from_numpy(np.asarray(Image.open(p).convert("RGB"), dtype=np.float32) / 255.0).permute(2, 0, 1)
    probs, inter = forward_pipeline(image, params, rc.pipeline, (rc.schedule.seed, 0), noise=rc.pipeline.noise_on)
    out = Path(args.out) / "renders"
    out.mkdir(parents=True, exist_ok=True)
    names = {"optics": "i_optics", "normalize": "i_normalized", "exposure": "i_exp", "mosaic": "raw",
             "channel_mean": "raw", "noise": "raw_noisy", "quantize": "raw_quantized"}
    _to_png(image).save(out / "input.png")
    for stage, t in inter.items():
        if stage in names:
            _to_png(t).save(out / f"{names[stage]}.png")
    Image.fromarray(_PALETTE[probs.argmax(0).numpy()], "RGB").save(out / "prediction.png")
    print(f"wrote {len(list(out.glob('*.png')))} renders to {out}")
    return EXIT_OK


def _severity(kind: str, text: str):
    try:
        if kind == "noise":
            parts = [float(v) for v in text.split(",")]
            return tuple(parts)
        if kind == "bitdepth":
            return int(text)
        return float(text)
    except ValueError as e:
        raise ConfigError(f"bad severity {text!r} for {kind}") from e


def cmd_corrupt(args) -> int:
    try:
        spec = CorruptionSpec(args.kind, _severity(args.kind, args.severity))
    except ValueError as e:
        raise ConfigError(str(e)) from e
    data = resolve_data(args.data, args.num_classes)
    out = Path(args.out)
    if out.exists() and any(out.iterdir()):
        raise ConfigError(f"{out} is not empty")
    pairs = [(corrupt(img, spec, (args.seed, i)).clamp(0, 1), lab) for i, (img, lab) in enumerate(data)]
    save_dataset(pairs, out)
    print(f"wrote {len(pairs)} {args.kind}-corrupted pairs to {args.out}")
    return EXIT_OK


def cmd_genscenes(args) -> int:
    if args.n < 1:
        raise ConfigError("--n must be >= 1")
    try:
        data = synthetic_dataset(args.n, args.seed, args.size, args.size)
    except ValueError as e:
        raise ConfigError(str(e)) from e
    out = Path(args.out)
    if out.exists() and any(out.iterdir()):
        if not args.overwrite:
            raise ConfigError(f"{out} is not empty; pass --overwrite to replace it")
        shutil.rmtree(out)
    save_dataset(data, out)
    print(f"wrote {args.n} scenes to {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rawseg", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        g = sp.add_mutually_exclusive_group()
        g.add_argument("--config", help="run config (TOML)")
        g.add_argument("--preset", help="shipped config: fixed_sensor, no_optics, full_codesign")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override (repeatable)")
        sp.add_argument("--seed", type=int)

    sp = sub.add_parser("train", help="run two-phase training")
    with_config(sp)
    sp.add_argument("--data", help="dataset directory or synthetic:<n>[:<seed>]")
    sp.add_argument("--val-data", dest="val_data")
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a checkpoint")
    with_config(sp)
    sp.add_argument("--checkpoint", required=True, help="checkpoint path without extension")
    sp.add_argument("--data")
    sp.add_argument("--bits", type=int, help="quantizer bit depth at evaluation")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("gradcheck", help="finite-difference check of every stage adjoint")
    sp.add_argument("stages", nargs="*", help=f"subset of: {', '.join(REGISTRY)}")
    sp.add_argument("--seeds", type=int, default=10)
    sp.add_argument("--tol", type=float, default=1e-4)
    sp.set_defaults(func=cmd_gradcheck)

    sp = sub.add_parser("render", help="dump every intermediate signal as PNG")
    with_config(sp)
    sp.add_argument("--checkpoint")
    sp.add_argument("--image", required=True, help="RGB PNG or synthetic:<seed>")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_render)

    sp = sub.add_parser("corrupt", help="write a corrupted copy of a dataset")
    sp.add_argument("--data", required=True)
    sp.add_argument("--kind", required=True, choices=CORRUPTIONS)
    sp.add_argument("--severity", required=True,
                    help="waves (blur), sigma_s,sigma_r (noise), bits (bitdepth), stops (exposure_shift)")
    sp.add_argument("--num-classes", dest="num_classes", type=int, default=19)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_corrupt)

    sp = sub.add_parser("genscenes", help="write a synthetic dataset")
    sp.add_argument("--n", type=int, required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--size", type=int, default=64)
    sp.add_argument("--overwrite", action="store_true")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_genscenes)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_CONFIG if e.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingAborted as e:
        print(f"aborted: {e} (last good checkpoint: {e.last_checkpoint})", file=sys.stderr)
        return EXIT_NUMERIC
    except (NumericFailure, FloatingPointError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
