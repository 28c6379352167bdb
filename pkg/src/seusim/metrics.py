"""Semantic segmentation quality metrics.

Per-class IoU_c = TP_c / (TP_c + FP_c + FN_c) from the label/prediction
confusion matrix.  GIoU pools numerators and denominators over classes;
WIoU weights per-class IoU by label frequency.  Classes absent from both
label and prediction are excluded.  Both metrics are percentages.
"""

from __future__ import annotations

import numpy as np


def confusion_matrix(labels: np.ndarray, predicted: np.ndarray, n_classes: int) -> np.ndarray:
    """Counts indexed [label, predicted]."""
    labels = np.asarray(labels)
    predicted = np.asarray(predicted)
    if labels.shape != predicted.shape:
        raise ValueError(f"shape mismatch: {labels.shape} vs {predicted.shape}")
    l = labels.reshape(-1)
    p = predicted.reshape(-1)
    if l.size and (min(l.min(), p.min()) < 0 or max(l.max(), p.max()) >= n_classes):
        raise ValueError("class index out of range")
    cm = np.bincount(l * n_classes + p, minlength=n_classes * n_classes)
    return cm.reshape(n_classes, n_classes)


def giou_wiou_from_confusion(cm: np.ndarray) -> tuple[float, float]:
    cm = np.asarray(cm, dtype=np.int64)
    tp = np.diag(cm)
    label_count = cm.sum(axis=1)
    pred_count = cm.sum(axis=0)
    denom = label_count + pred_count - tp
    present = denom > 0
    giou = 100.0 * tp.sum() / denom.sum() if denom.sum() else 100.0
    iou = tp[present] / denom[present]
    freq = label_count[present] / label_count.sum()
    wiou = 100.0 * float(np.dot(iou, freq) / freq.sum())
    return float(giou), wiou


def giou(golden_labels: np.ndarray, predicted: np.ndarray, n_classes: int) -> float:
    return giou_wiou_from_confusion(confusion_matrix(golden_labels, predicted, n_classes))[0]


def wiou(golden_labels: np.ndarray, predicted: np.ndarray, n_classes: int) -> float:
    return giou_wiou_from_confusion(confusion_matrix(golden_labels, predicted, n_classes))[1]
