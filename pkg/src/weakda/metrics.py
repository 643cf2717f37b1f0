"""Segmentation and weak-label quality metrics.

The confusion matrix is a (C, C) integer array with rows indexing ground
truth and columns indexing prediction. Per-shard matrices merge by addition,
so accumulation order never matters. Undefined quantities (classes that were
never seen nor predicted, zero-denominator precision/recall) are reported as
NaN and excluded from means.
"""

import numpy as np


def new_confusion(num_classes):
    return np.zeros((num_classes, num_classes), dtype=np.int64)


def accumulate(cm, pred_labels, truth):
    """Add per-pixel counts to a confusion matrix.

    pred_labels: integer label map (any shape); truth: integer label map of
    the same shape or a matching one-hot mask with a trailing class axis.
    Returns the updated matrix (also modified in place).
    """
    c = cm.shape[0]
    pred_labels = np.asarray(pred_labels)
    truth = np.asarray(truth)
    if truth.ndim == pred_labels.ndim + 1:
        if truth.shape[:-1] != pred_labels.shape or truth.shape[-1] != c:
            raise ValueError(f"prediction/mask shape mismatch: {pred_labels.shape} vs {truth.shape}")
        truth = truth.argmax(axis=-1)
    elif truth.shape != pred_labels.shape:
        raise ValueError(f"prediction/mask shape mismatch: {pred_labels.shape} vs {truth.shape}")
    if pred_labels.size == 0:
        return cm
    if pred_labels.min() < 0 or pred_labels.max() >= c:
        raise ValueError("prediction labels out of range")
    if truth.min() < 0 or truth.max() >= c:
        raise ValueError("ground-truth labels out of range")
    flat = c * truth.reshape(-1).astype(np.int64) + pred_labels.reshape(-1)
    cm += np.bincount(flat, minlength=c * c).reshape(c, c)
    return cm


def per_class_iou(cm):
    """Intersection over union per class; NaN where TP+FP+FN == 0."""
    cm = np.asarray(cm, dtype=np.float64)
    tp = np.diag(cm)
    union = cm.sum(axis=0) + cm.sum(axis=1) - tp
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(union > 0, tp / np.maximum(union, 1), np.nan)
    return iou


def mean_iou(cm, subset=None):
    """Mean IoU over a class subset (all classes if None), skipping NaNs.

    Raises if no class in the subset has a defined IoU.
    """
    iou = per_class_iou(cm)
    if subset is not None:
        subset = np.asarray(sorted(set(int(s) for s in subset)))
        if subset.size == 0 or subset.min() < 0 or subset.max() >= cm.shape[0]:
            raise ValueError("subset must be a non-empty set of valid class indices")
        iou = iou[subset]
    defined = ~np.isnan(iou)
    if not defined.any():
        raise ValueError("no class in the subset has a defined IoU")
    return float(iou[defined].mean())


def argmax_labels(probs):
    """Per-pixel argmax of an output map; ties break toward the lowest index."""
    return np.asarray(probs).argmax(axis=-1)


def weak_label_pr(pred_y, true_y):
    """Precision/recall of multi-hot presence predictions.

    pred_y, true_y: (N, C) binary arrays over N images. Returns a dict with
    per-category arrays and micro-averaged scalars; zero-denominator cases
    are NaN.
    """
    pred_y = np.asarray(pred_y).astype(bool)
    true_y = np.asarray(true_y).astype(bool)
    if pred_y.shape != true_y.shape:
        raise ValueError("prediction/truth shape mismatch")
    if pred_y.ndim == 1:
        pred_y = pred_y[None]
        true_y = true_y[None]
    tp = (pred_y & true_y).sum(axis=0).astype(float)
    fp = (pred_y & ~true_y).sum(axis=0).astype(float)
    fn = (~pred_y & true_y).sum(axis=0).astype(float)
    with np.errstate(invalid="ignore", divide="ignore"):
        precision = np.where(tp + fp > 0, tp / np.maximum(tp + fp, 1), np.nan)
        recall = np.where(tp + fn > 0, tp / np.maximum(tp + fn, 1), np.nan)
    tps, fps, fns = tp.sum(), fp.sum(), fn.sum()
    micro_p = tps / (tps + fps) if tps + fps > 0 else float("nan")
    micro_r = tps / (tps + fns) if tps + fns > 0 else float("nan")
    return {
        "precision": precision,
        "recall": recall,
        "micro_precision": float(micro_p),
        "micro_recall": float(micro_r),
    }
