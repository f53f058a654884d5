"""Evaluation: confusion matrices, per-class IoU / mIoU, and confidence-margin
diagnostics that relate importance weights to prediction correctness.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .data_synth import IGNORE
from .edik import ImportanceMode, importance_map
from .errors import ParameterError, ValidationError
from .segmodel import predict_probs


@dataclass
class MetricsReport:
    """Confusion matrix (rows: ground truth, cols: prediction) and IoU summary."""

    confusion: np.ndarray
    iou: np.ndarray        # per class; NaN where the class is undefined
    miou: float            # mean over defined classes only
    n_pixels: int

    def to_dict(self) -> dict:
        return {
            "miou": self.miou,
            "miou_points": 100.0 * self.miou,
            "iou_per_class": [None if np.isnan(v) else float(v) for v in self.iou],
            "n_pixels": int(self.n_pixels),
            "confusion": self.confusion.astype(int).tolist(),
        }

    def to_text_table(self) -> str:
        lines = [f"{'class':>8}  {'iou':>8}"]
        for c, v in enumerate(self.iou):
            cell = "undef" if np.isnan(v) else f"{v:.4f}"
            lines.append(f"{c:>8}  {cell:>8}")
        lines.append(f"{'mIoU':>8}  {self.miou:>8.4f}")
        return "\n".join(lines)


def confusion_matrix(pred: np.ndarray, gt: np.ndarray, num_classes: int) -> np.ndarray:
    """Accumulate a (C, C) int64 confusion matrix, skipping IGNORE pixels."""
    if pred.shape != gt.shape:
        raise ParameterError(f"pred shape {pred.shape} != gt shape {gt.shape}")
    valid = gt != IGNORE
    gt_v = gt[valid].astype(np.int64)
    pred_v = pred[valid].astype(np.int64)
    if gt_v.size and (gt_v.min() < 0 or gt_v.max() >= num_classes):
        raise ValidationError(f"ground-truth label out of range [0, {num_classes})")
    if pred_v.size and (pred_v.min() < 0 or pred_v.max() >= num_classes):
        raise ValidationError(f"prediction out of range [0, {num_classes})")
    idx = gt_v * num_classes + pred_v
    return np.bincount(idx, minlength=num_classes ** 2).reshape(num_classes, num_classes)


def metrics_from_confusion(confusion: np.ndarray) -> MetricsReport:
    """Per-class IoU = TP / (TP + FP + FN); classes absent from both ground
    truth and predictions are undefined and excluded from the mean."""
    confusion = np.asarray(confusion, dtype=np.int64)
    tp = np.diag(confusion).astype(np.float64)
    fn = confusion.sum(axis=1) - tp
    fp = confusion.sum(axis=0) - tp
    denom = tp + fp + fn
    defined = denom > 0
    if not defined.any():
        raise ParameterError("no defined classes: confusion matrix is empty")
    iou = np.full(confusion.shape[0], np.nan)
    iou[defined] = tp[defined] / denom[defined]
    return MetricsReport(
        confusion=confusion,
        iou=iou,
        miou=float(iou[defined].mean()),
        n_pixels=int(confusion.sum()),
    )


def evaluate_model(model, samples, num_classes: int) -> MetricsReport:
    """mIoU of a model over a labelled sample list."""
    total = np.zeros((num_classes, num_classes), dtype=np.int64)
    for s in samples:
        if s.label is None:
            raise ParameterError(f"sample '{s.id}' has no label; cannot evaluate")
        probs = predict_probs(model, s.image)
        pred = probs.argmax(axis=-1)
        total += confusion_matrix(pred, s.label, num_classes)
    return metrics_from_confusion(total)


@dataclass
class MarginStats:
    """Mean top-1 / top-2 probability and importance weight, split by
    whether the prediction was correct.  Empty groups report None."""

    mean_p1_correct: float | None
    mean_p2_correct: float | None
    mean_importance_correct: float | None
    n_correct: int
    mean_p1_wrong: float | None
    mean_p2_wrong: float | None
    mean_importance_wrong: float | None
    n_wrong: int
    sample_n: int = 0

    def importance_gap(self) -> float | None:
        if self.mean_importance_correct is None or self.mean_importance_wrong is None:
            return None
        return self.mean_importance_correct - self.mean_importance_wrong

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in (
            "mean_p1_correct", "mean_p2_correct", "mean_importance_correct", "n_correct",
            "mean_p1_wrong", "mean_p2_wrong", "mean_importance_wrong", "n_wrong",
            "sample_n")}
        d["importance_gap"] = self.importance_gap()
        return d

    def to_csv(self) -> str:
        def cell(v):
            return "" if v is None else f"{v:.6f}"
        lines = ["group,mean_p1,mean_p2,mean_importance,n_pixels"]
        lines.append(",".join(["correct", cell(self.mean_p1_correct),
                               cell(self.mean_p2_correct),
                               cell(self.mean_importance_correct), str(self.n_correct)]))
        lines.append(",".join(["wrong", cell(self.mean_p1_wrong),
                               cell(self.mean_p2_wrong),
                               cell(self.mean_importance_wrong), str(self.n_wrong)]))
        return "\n".join(lines) + "\n"


def _margin_stats_from_arrays(p1, p2, omega, correct, sample_n, seed) -> MarginStats:
    rng = np.random.default_rng(seed)

    def summarise(mask):
        idx = np.flatnonzero(mask)
        if idx.size == 0:
            return None, None, None, 0
        if sample_n is not None and idx.size > sample_n:
            idx = rng.choice(idx, size=sample_n, replace=False)
        return (float(p1[idx].mean()), float(p2[idx].mean()),
                float(omega[idx].mean()), int(idx.size))

    c1, c2, cw, nc = summarise(correct)
    w1, w2, ww, nw = summarise(~correct)
    return MarginStats(
        mean_p1_correct=c1, mean_p2_correct=c2, mean_importance_correct=cw, n_correct=nc,
        mean_p1_wrong=w1, mean_p2_wrong=w2, mean_importance_wrong=ww, n_wrong=nw,
        sample_n=0 if sample_n is None else sample_n,
    )


def margin_diagnostics(model, samples, sample_n: int | None = 1000,
                       seed: int = 0) -> MarginStats:
    """Importance statistics over correct vs. wrong pixels of a frozen model.

    Up to sample_n pixels are drawn uniformly (without replacement) from each
    group; sample_n=None keeps every pixel.  IGNORE pixels are excluded.
    """
    if sample_n is not None and sample_n < 1:
        raise ParameterError(f"sample_n must be >= 1 or None, got {sample_n}")
    p1s, p2s, oms, cors = [], [], [], []
    for s in samples:
        if s.label is None:
            raise ParameterError(f"sample '{s.id}' has no label; cannot diagnose")
        probs = predict_probs(model, s.image)          # (H, W, C)
        pt = torch.from_numpy(probs.transpose(2, 0, 1))
        omega = importance_map(pt, ImportanceMode.IAPC).numpy()
        top2 = np.sort(probs, axis=-1)[..., ::-1][..., :2]
        pred = probs.argmax(axis=-1)
        valid = s.label != IGNORE
        p1s.append(top2[..., 0][valid])
        p2s.append(top2[..., 1][valid])
        oms.append(omega[valid])
        cors.append((pred == s.label)[valid])
    if not p1s:
        raise ParameterError("no samples to diagnose")
    return _margin_stats_from_arrays(
        np.concatenate(p1s), np.concatenate(p2s), np.concatenate(oms),
        np.concatenate(cors), sample_n, seed)
