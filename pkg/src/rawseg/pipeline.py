"""End-to-end camera-to-segmentation chain and its two-phase training loop."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .diffcore import (NumericFailure, OptimState, ParamSet, RunContext, adamw_step, cosine_lr,
                       forward_backward, run_forward, save_checkpoint)
from .losses import LossStage, LossWeights, OhemConfig, SmoothnessConfig
from .metrics import accumulate, confusion_matrix, miou, pixel_acc
from .optics import IDENTITY_LENS, LensParams, NormalizeStage, OpticsStage
from .segnet import SegNetConfig, SegNetStage, build
from .sensor import (ChannelMeanStage, ExposureStage, MosaicStage, NoiseParams, NoiseStage, QuantizeStage,
                     gamma_for_gain, init_cfa)

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("epoch", "l_ohem", "l_lovasz", "l_smooth", "l_total", "lr", "tau_pi", "val_miou",
                  "val_pixel_acc")


@dataclass
class PipelineConfig:
    lens: LensParams = IDENTITY_LENS
    pupil_samples: int = 64
    # wide enough to hold a full wave of defocus without truncation
    kernel_size: int = 33
    # unit gain: the frame is already normalized to mean 0.5
    exposure_gamma_init: float = field(default_factory=lambda: gamma_for_gain(1.0))
    cfa_layout: str = "BAYER_RGGB"
    soft_cfa_selection: bool = False
    noise: NoiseParams = field(default_factory=NoiseParams)
    bits: int = 10
    net: SegNetConfig = field(default_factory=SegNetConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    ohem: OhemConfig = field(default_factory=OhemConfig)
    smooth: SmoothnessConfig = field(default_factory=SmoothnessConfig)
    # stage switches
    optics_on: bool = True
    normalize_on: bool = True
    exposure_on: bool = True
    cfa_on: bool = True
    noise_on: bool = True
    quant_on: bool = True
    # trainability
    optics_trainable: bool = True
    sensor_trainable: bool = True
    cfa_learnable: bool = True
    noise_trainable: bool = False
    eval_noise: bool = False
    eval_seed: int = 12345

    def __post_init__(self):
        if not 1 <= self.bits <= 16:
            raise ValueError("bits must lie in [1, 16]")

    @property
    def uses_optics(self) -> bool:
        return self.optics_on and not self.lens.is_identity


@dataclass
class TrainSchedule:
    total_epochs: int = 10
    warmup_epochs: int | None = None  # None -> ceil(0.2 * total), at most total - 1
    steps_per_epoch: int | None = None  # None -> one pass over the data
    batch_size: int = 8
    tau_start: float = 1.0
    tau_end: float = 0.05
    throttle: float = 0.1
    seed: int = 0
    lr: float = 2e-3
    weight_decay: float = 1e-4
    val_every: int = 1  # validation pass every k epochs; the last epoch is always validated

    def __post_init__(self):
        if self.total_epochs < 1:
            raise ValueError("total_epochs must be >= 1")
        if self.warmup_epochs is None:
            self.warmup_epochs = min(math.ceil(0.2 * self.total_epochs), self.total_epochs - 1)
        if not 0 <= self.warmup_epochs < self.total_epochs:
            raise ValueError("warmup_epochs must satisfy 0 <= T1 < T")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.steps_per_epoch is not None and self.steps_per_epoch < 1:
            raise ValueError("steps_per_epoch must be >= 1")
        if not 0 < self.tau_end <= self.tau_start:
            raise ValueError("need 0 < tau_end <= tau_start")
        if self.throttle < 0:
            raise ValueError("throttle must be >= 0")
        if self.val_every < 1:
            raise ValueError("val_every must be >= 1")

    def tau(self, epoch: int) -> float:
        """Selection temperature in effect during ``epoch`` (1-based)."""
        T, T1 = self.total_epochs, self.warmup_epochs
        if epoch <= T1:
            return self.tau_start
        frac = (epoch - T1) / (T - T1)
        return self.tau_start * (self.tau_end / self.tau_start) ** frac


class TrainingAborted(RuntimeError):
    def __init__(self, msg: str, last_checkpoint: Path | None):
        super().__init__(msg)
        self.last_checkpoint = last_checkpoint


# --------------------------------------------------------------------------- construction

def init_params(cfg: PipelineConfig, seed: int = 0, dtype=torch.float32) -> ParamSet:
    """Parameters for every enabled stage, tagged with their group."""
    params = ParamSet()
    if cfg.uses_optics:
        params.add("optics.zernike", cfg.lens.zernike.to(dtype), "optics",
                   cfg.optics_trainable and cfg.lens.trainable)
    if cfg.exposure_on:
        params.add("sensor.gamma", torch.tensor(cfg.exposure_gamma_init, dtype=dtype), "sensor",
                   cfg.sensor_trainable)
    if cfg.cfa_on:
        cfa = init_cfa(cfg.cfa_layout, cfg.soft_cfa_selection)
        learn = cfg.sensor_trainable and cfg.cfa_learnable
        params.add("sensor.cfa_logits", cfa.logits.to(dtype), "sensor", learn)
        params.add("sensor.cfa_select", cfa.select.to(dtype), "sensor", learn and cfg.soft_cfa_selection)
    if cfg.noise_on:
        trainable = cfg.sensor_trainable and cfg.noise_trainable
        params.add("sensor.sigma_s", torch.tensor(cfg.noise.sigma_s, dtype=dtype), "sensor", trainable)
        params.add("sensor.sigma_r", torch.tensor(cfg.noise.sigma_r, dtype=dtype), "sensor", trainable)
    build(cfg.net, seed, params)
    if dtype != torch.float32:
        params = params.to(dtype)
    return params


def build_stages(cfg: PipelineConfig, bits: int | None = None, noise: bool | None = None,
                 loss: bool = False) -> list:
    """Stage chain for ``cfg``; ``bits``/``noise`` override the config (used at eval)."""
    stages = []
    if cfg.uses_optics:
        stages.append(OpticsStage(cfg.lens, cfg.pupil_samples, cfg.kernel_size))
    if cfg.normalize_on:
        stages.append(NormalizeStage())
    if cfg.exposure_on:
        stages.append(ExposureStage())
    if cfg.cfa_on:
        stages.append(MosaicStage(init_cfa(cfg.cfa_layout, cfg.soft_cfa_selection)))
    else:
        stages.append(ChannelMeanStage())
    if cfg.noise_on if noise is None else noise:
        stages.append(NoiseStage())
    if cfg.quant_on:
        stages.append(QuantizeStage(cfg.bits if bits is None else bits))
    stages.append(SegNetStage(cfg.net))
    if loss:
        stages.append(LossStage(cfg.weights, cfg.ohem, cfg.smooth))
    return stages


def set_tau(stages: Sequence, tau: float) -> None:
    for s in stages:
        if isinstance(s, MosaicStage):
            s.cfa.tau = tau


def forward_pipeline(x: torch.Tensor, params: ParamSet, cfg: PipelineConfig,
                     rng_key: tuple[int, int] = (0, 0), bits: int | None = None,
                     noise: bool | None = None, tau: float | None = None):
    """Radiance (B, 3, H, W) -> (probabilities (B, C, H, W), intermediates by stage name)."""
    stages = build_stages(cfg, bits, noise)
    if tau is not None:
        set_tau(stages, tau)
    squeeze = x.dim() == 3
    xb = x.unsqueeze(0) if squeeze else x
    ctx = RunContext(seed=rng_key[0], step=rng_key[1], training=False)
    dtype = params[params.names("network")[0]].value.dtype
    probs, _ = run_forward(stages, xb.to(dtype), params, ctx, record=False)
    inter = dict(ctx.outputs)
    if squeeze:
        probs = probs[0]
        inter = {k: v[0] for k, v in inter.items()}
    return probs, inter


# --------------------------------------------------------------------------- evaluation

def _stack(dataset):
    if not dataset:
        raise ValueError("dataset is empty")
    shapes = {tuple(img.shape) for img, _ in dataset}
    if len(shapes) != 1:
        raise ValueError(f"all images must share one size, got {sorted(shapes)}")
    return torch.stack([img for img, _ in dataset]), torch.stack([lab for _, lab in dataset])


def predict(params: ParamSet, images: torch.Tensor, cfg: PipelineConfig, bits: int | None = None,
            batch_size: int = 16) -> torch.Tensor:
    """Argmax label maps (N, H, W) for a stack of radiance images."""
    stages = build_stages(cfg, bits, noise=cfg.eval_noise)
    set_tau(stages, 1e-3)  # soft selection collapses onto the hard layout at eval
    dtype = params[params.names("network")[0]].value.dtype
    preds = []
    for i in range(0, len(images), batch_size):
        ctx = RunContext(seed=cfg.eval_seed, step=i, training=False)
        probs, _ = run_forward(stages, images[i:i + batch_size].to(dtype), params, ctx, record=False)
        preds.append(probs.argmax(dim=1))
    return torch.cat(preds)


def evaluate(params: ParamSet, dataset, cfg: PipelineConfig, bits: int | None = None,
             batch_size: int = 16) -> dict:
    """Confusion matrix, mIoU, pixel accuracy and per-class IoU on ``dataset``."""
    head = params["net.head.weight"].value.shape[0]
    if head != cfg.net.num_classes:
        raise ValueError(f"network predicts {head} classes, config says {cfg.net.num_classes}")
    images, labels = _stack(dataset)
    preds = predict(params, images, cfg, bits, batch_size)
    cm = confusion_matrix(cfg.net.num_classes)
    for p, t in zip(preds, labels):
        accumulate(cm, p, t)
    m, iou = miou(cm)
    return {"miou": m, "pixel_acc": pixel_acc(cm), "per_class_iou": iou, "confusion": cm}


# --------------------------------------------------------------------------- training

@dataclass
class TrainResult:
    params: ParamSet
    state: OptimState
    rows: list[dict]
    checkpoints: list[Path]


def _write_metrics(path: Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=METRIC_COLUMNS)
        w.writeheader()
        for row in rows:
            w.writerow({k: (f"{v:.8g}" if isinstance(v, float) else v) for k, v in row.items()})


def train(dataset, cfg: PipelineConfig, sched: TrainSchedule, val_set=None,
          out_dir: str | Path | None = None, params: ParamSet | None = None,
          on_step: Callable[[int, dict], None] | None = None) -> TrainResult:
    """Two-phase training: network and sensor first, then optics unfrozen and throttled.

    Epochs ``1..T1`` keep the optics group frozen. Afterwards every optics
    update is multiplied by ``sched.throttle``. A checkpoint is written before
    the first epoch (epoch 0) and after every epoch. Validation columns use the
    training data when no ``val_set`` is given, and are NaN on epochs skipped by
    ``sched.val_every``.
    """
    images, labels = _stack(dataset)
    val_set = val_set if val_set is not None else dataset
    n = len(images)
    bs = min(sched.batch_size, n)
    steps_per_epoch = sched.steps_per_epoch or math.ceil(n / bs)
    total = sched.total_epochs * steps_per_epoch
    params = params if params is not None else init_params(cfg, sched.seed)
    dtype = params[params.names("network")[0]].value.dtype
    images = images.to(dtype)
    stages = build_stages(cfg, loss=True)
    loss_stage = stages[-1]
    state = OptimState(lr=sched.lr, weight_decay=sched.weight_decay)
    state.ensure(params)

    out = Path(out_dir) if out_dir is not None else None
    ckpts: list[Path] = []
    if out is not None:
        (out / "checkpoints").mkdir(parents=True, exist_ok=True)

    def checkpoint(epoch: int, tau: float) -> None:
        if out is None:
            return
        path = out / "checkpoints" / f"epoch_{epoch:03d}"
        save_checkpoint(path, params, state, {"epoch": epoch, "tau_pi": tau, "seed": sched.seed})
        ckpts.append(path)

    rows: list[dict] = []
    order_rng = np.random.default_rng(np.random.SeedSequence([sched.seed, 0x5EED]))
    params.set_frozen("optics", sched.warmup_epochs > 0)
    checkpoint(0, sched.tau_start)
    step = 0
    for epoch in range(1, sched.total_epochs + 1):
        joint = epoch > sched.warmup_epochs
        params.set_frozen("optics", not joint)
        scale = {"optics": sched.throttle} if joint else {}
        tau = sched.tau(epoch)
        set_tau(stages, tau)
        sums = {"l_ohem": 0.0, "l_lovasz": 0.0, "l_smooth": 0.0, "l_total": 0.0}
        perm = order_rng.permutation(n)
        for i in range(steps_per_epoch):
            idx = perm[(i * bs) % n:][:bs]
            if len(idx) < bs:  # wrap around when steps_per_epoch exceeds one pass
                idx = np.concatenate([idx, perm[:bs - len(idx)]])
            idx = torch.from_numpy(np.asarray(idx))
            state.lr = cosine_lr(step, total, sched.lr)
            loss_stage.progress = step / total
            ctx = RunContext(seed=sched.seed, step=step, aux={"labels": labels[idx]})
            try:
                res = forward_backward(stages, images[idx], params, ctx, input_grad=False)
                if not torch.isfinite(res.output):
                    raise NumericFailure("loss")
                adamw_step(state, params, res.grads, scale)
            except (NumericFailure, FloatingPointError) as e:
                last = ckpts[-1] if ckpts else None
                raise TrainingAborted(f"numeric failure at epoch {epoch} step {step}: {e}", last) from e
            for k in sums:
                sums[k] += loss_stage.last_terms[k]
            if on_step is not None:
                on_step(step, {"grads": res.grads, "epoch": epoch, **loss_stage.last_terms})
            step += 1
        if epoch % sched.val_every == 0 or epoch == sched.total_epochs:
            report = evaluate(params, val_set, cfg)
        else:
            report = {"miou": math.nan, "pixel_acc": math.nan}
        row = {k: v / steps_per_epoch for k, v in sums.items()}
        rows.append({"epoch": epoch, **row, "lr": state.lr, "tau_pi": tau,
                     "val_miou": report["miou"], "val_pixel_acc": report["pixel_acc"]})
        log.info("epoch %d: loss %.4f val mIoU %.4f", epoch, row["l_total"], report["miou"])
        checkpoint(epoch, tau)
        if out is not None:
            _write_metrics(out / "metrics.csv", rows)
    return TrainResult(params, state, rows, ckpts)


__all__ = [
    "METRIC_COLUMNS", "PipelineConfig", "TrainResult", "TrainSchedule", "TrainingAborted", "build_stages",
    "evaluate", "forward_pipeline", "init_params", "predict", "set_tau", "train",
]
