"""Checkpoint I/O: a text manifest plus one little-endian float32 blob.

Manifest lines are ``key: value``. Tensor entries read
``tensor: <kind> <name> <group> <trainable> <frozen> <shape> <count>`` where
kind is ``param``, ``exp_avg`` or ``exp_avg_sq`` and shape is ``AxBxC`` (``-``
for scalars). The blob holds the tensors back to back in manifest order.
"""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np
import torch

from .optim import OptimState
from .params import Param, ParamSet

FORMAT_VERSION = 1
_KINDS = ("param", "exp_avg", "exp_avg_sq")


def _shape_str(shape) -> str:
    return "x".join(str(s) for s in shape) if len(shape) else "-"


def _parse_shape(s: str) -> tuple[int, ...]:
    return () if s == "-" else tuple(int(t) for t in s.split("x"))


def save_checkpoint(path: str | os.PathLike, params: ParamSet, state: OptimState | None = None,
                    meta: dict | None = None) -> tuple[Path, Path]:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    state = state or OptimState()
    state.ensure(params)
    lines = [f"format_version: {FORMAT_VERSION}", "dtype: float32", "byteorder: little",
             f"step: {state.step}", f"lr: {state.lr!r}", f"weight_decay: {state.weight_decay!r}",
             f"betas: {state.beta1!r} {state.beta2!r}", f"eps: {state.eps!r}"]
    for k, v in (meta or {}).items():
        lines.append(f"meta.{k}: {v}")
    chunks = []
    for kind in _KINDS:
        for name, p in params.items():
            t = {"param": p.value, "exp_avg": state.exp_avg[name], "exp_avg_sq": state.exp_avg_sq[name]}[kind]
            lines.append(f"tensor: {kind} {name} {p.group} {int(p.trainable)} {int(p.frozen)} "
                         f"{_shape_str(t.shape)} {t.numel()}")
            chunks.append(t.detach().cpu().to(torch.float32).numpy().astype("<f4").ravel())
    for name in params:
        lines.append(f"count: {name} {state.counts[name]}")
    manifest = path.with_suffix(".manifest")
    blob = path.with_suffix(".bin")
    manifest.write_text("\n".join(lines) + "\n")
    blob.write_bytes(np.concatenate(chunks).tobytes() if chunks else b"")
    return manifest, blob


def load_checkpoint(path: str | os.PathLike) -> tuple[ParamSet, OptimState, dict]:
    path = Path(path)
    text = path.with_suffix(".manifest").read_text().splitlines()
    raw = np.frombuffer(path.with_suffix(".bin").read_bytes(), dtype="<f4")
    header, meta, entries, counts = {}, {}, [], {}
    for line in text:
        if not line.strip():
            continue
        key, _, value = line.partition(": ")
        if key == "tensor":
            entries.append(value.split(" "))
        elif key == "count":
            name, n = value.rsplit(" ", 1)
            counts[name] = int(n)
        elif key.startswith("meta."):
            meta[key[5:]] = value
        else:
            header[key] = value
    if int(header["format_version"]) != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format {header['format_version']}")
    b1, b2 = (float(t) for t in header["betas"].split())
    state = OptimState(lr=float(header["lr"]), weight_decay=float(header["weight_decay"]),
                       beta1=b1, beta2=b2, eps=float(header["eps"]), step=int(header["step"]))
    params = ParamSet()
    offset = 0
    for kind, name, group, trainable, frozen, shape, count in entries:
        n = int(count)
        t = torch.from_numpy(raw[offset:offset + n].astype(np.float32)).reshape(_parse_shape(shape))
        offset += n
        if kind == "param":
            params._params[name] = Param(t, group, bool(int(trainable)), bool(int(frozen)))
        elif kind == "exp_avg":
            state.exp_avg[name] = t
        else:
            state.exp_avg_sq[name] = t
    if offset != raw.size:
        raise ValueError(f"checkpoint blob has {raw.size} values, manifest describes {offset}")
    state.counts = {k: counts.get(k, 0) for k in params}
    return params, state, meta
