"""Confusion matrix, IoU and pixel accuracy, plus CSV/PNG report emission."""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .losses import IGNORE


def confusion_matrix(num_classes: int) -> np.ndarray:
    return np.zeros((num_classes, num_classes), dtype=np.int64)


def accumulate(cm: np.ndarray, pred, truth) -> np.ndarray:
    """Add one prediction/truth pair; rows are truth, columns prediction."""
    pred = np.asarray(pred.cpu() if isinstance(pred, torch.Tensor) else pred).astype(np.int64)
    truth = np.asarray(truth.cpu() if isinstance(truth, torch.Tensor) else truth).astype(np.int64)
    if pred.shape != truth.shape:
        raise ValueError(f"prediction shape {pred.shape} != truth shape {truth.shape}")
    C = cm.shape[0]
    keep = truth != IGNORE
    t, p = truth[keep], pred[keep]
    if t.size and (t.min() < 0 or t.max() >= C or p.min() < 0 or p.max() >= C):
        raise ValueError(f"class index outside [0, {C})")
    cm += np.bincount(t * C + p, minlength=C * C).reshape(C, C)
    return cm


def per_class_iou(cm: np.ndarray) -> np.ndarray:
    """IoU per class; NaN where the class is absent from both truth and prediction."""
    tp = np.diag(cm).astype(float)
    denom = cm.sum(0) + cm.sum(1) - tp
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(denom > 0, tp / np.maximum(denom, 1), np.nan)


def miou(cm: np.ndarray) -> tuple[float, list[float]]:
    iou = per_class_iou(cm)
    if np.all(np.isnan(iou)):
        raise ValueError("no class present in truth or prediction")
    return float(np.nanmean(iou)), iou.tolist()


def pixel_acc(cm: np.ndarray) -> float:
    total = cm.sum()
    if total == 0:
        raise ValueError("empty confusion matrix")
    return float(np.trace(cm) / total)


def write_report(out_dir: str | Path, cm: np.ndarray, class_names: Sequence[str] | None = None,
                 plot: bool = True) -> dict:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    C = cm.shape[0]
    names = list(class_names) if class_names else [str(c) for c in range(C)]
    m, iou = miou(cm)
    acc = pixel_acc(cm)
    with open(out_dir / "report.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["class", "iou"])
        for name, v in zip(names, iou):
            w.writerow([name, "" if np.isnan(v) else f"{v:.6f}"])
        w.writerow(["mean_iou", f"{m:.6f}"])
        w.writerow(["pixel_acc", f"{acc:.6f}"])
    if plot:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        fig, ax = plt.subplots(figsize=(max(4, 0.5 * C + 2), 3))
        ax.bar(names, np.nan_to_num(iou))
        ax.set_ylim(0, 1)
        ax.set_ylabel("IoU")
        ax.set_title(f"mIoU {m:.3f}  pixel acc {acc:.3f}")
        ax.tick_params(axis="x", rotation=45)
        fig.tight_layout()
        fig.savefig(out_dir / "report.png", dpi=100)
        plt.close(fig)
    return {"miou": m, "pixel_acc": acc, "per_class_iou": iou, "confusion": cm.tolist()}
