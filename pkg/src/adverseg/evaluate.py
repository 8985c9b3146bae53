"""Metrics, confidence analyses, PNG export, and the gradient-check harness."""

from __future__ import annotations

import csv
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
import torch
from PIL import Image

from .maps import IGNORE, ShapeMismatchError, argmax_labels
from .data import Sample


class UndefinedMetricError(ValueError):
    """Every class has zero union; the mean IoU is undefined."""


def confusion(pred: np.ndarray, gt: np.ndarray, num_classes: int) -> np.ndarray:
    """(C, C) count matrix, rows = ground truth, columns = prediction.

    IGNORE ground-truth pixels are excluded.
    """
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ShapeMismatchError(f"pred {pred.shape} vs gt {gt.shape}")
    keep = gt != IGNORE
    flat = num_classes * gt[keep].astype(np.int64) + pred[keep].astype(np.int64)
    counts = np.bincount(flat, minlength=num_classes * num_classes)
    return counts.reshape(num_classes, num_classes)


def mean_iou(matrix: np.ndarray):
    """Per-class IoU list (None where the union is zero) and their mean.

    Classes absent from both prediction and ground truth are excluded from
    the mean; if every class is excluded the metric is undefined.
    """
    matrix = np.asarray(matrix, dtype=np.float64)
    inter = np.diag(matrix)
    union = matrix.sum(axis=1) + matrix.sum(axis=0) - inter
    per_class = [None if union[c] == 0 else float(inter[c] / union[c])
                 for c in range(matrix.shape[0])]
    valid = [v for v in per_class if v is not None]
    if not valid:
        raise UndefinedMetricError("all classes have zero union")
    return per_class, float(np.mean(valid))


def selected_pixel_stats(conf: np.ndarray, pred: np.ndarray, gt: np.ndarray,
                         threshold: float):
    """Fraction of non-ignored pixels above the threshold, and their accuracy.

    Accuracy is None when no pixel is selected.
    """
    conf = np.asarray(conf)
    if conf.ndim == 3:
        conf = conf[..., 0]
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if conf.shape != pred.shape or pred.shape != gt.shape:
        raise ShapeMismatchError(
            f"conf {conf.shape} vs pred {pred.shape} vs gt {gt.shape}")
    evaluated = gt != IGNORE
    n_eval = int(evaluated.sum())
    if n_eval == 0:
        return 0.0, None
    selected = evaluated & (conf > threshold)
    n_sel = int(selected.sum())
    fraction = n_sel / n_eval
    if n_sel == 0:
        return fraction, None
    accuracy = float((pred[selected] == gt[selected]).mean())
    return fraction, accuracy


def default_palette() -> np.ndarray:
    """Fixed 256-entry color table built by bit-reversal, one color per label."""
    palette = np.zeros((256, 3), dtype=np.uint8)
    for label in range(256):
        value, shift = label, 7
        r = g = b = 0
        while value:
            r |= (value & 1) << shift
            g |= ((value >> 1) & 1) << shift
            b |= ((value >> 2) & 1) << shift
            value >>= 3
            shift -= 1
        palette[label] = (r, g, b)
    return palette


def export_confidence_png(conf: np.ndarray, path) -> None:
    """8-bit grayscale export; pixel value = round-half-up of 255 * confidence."""
    conf = np.asarray(conf, dtype=np.float64)
    if conf.ndim == 3:
        conf = conf[..., 0]
    gray = np.floor(255.0 * conf + 0.5).clip(0, 255).astype(np.uint8)
    Image.fromarray(gray, mode="L").save(path)


def export_prediction_png(labels: np.ndarray, palette: Optional[np.ndarray],
                          path) -> None:
    """Indexed-color export of a label map using the given 256x3 palette."""
    if palette is None:
        palette = default_palette()
    img = Image.fromarray(np.asarray(labels, dtype=np.uint8), mode="P")
    img.putpalette(palette.astype(np.uint8).flatten().tolist())
    img.save(path)


def grad_check(loss_fn: Callable[[], torch.Tensor],
               params: Iterable[torch.Tensor], step: float = 1e-5) -> float:
    """Max relative error between analytic gradients and central differences.

    ``loss_fn`` must rebuild the loss from the current parameter values on
    every call. Relative error uses |a - b| / max(|a|, |b|, 1e-12). Use 64-bit
    parameters and small inputs; the sweep revisits every parameter element
    twice.
    """
    params = [p for p in params]
    if not params:
        return 0.0
    loss = loss_fn()
    if not torch.isfinite(loss):
        raise ValueError("loss is not finite")
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    worst = 0.0
    for param, grad in zip(params, grads):
        flat = param.detach().reshape(-1)
        analytic = (torch.zeros_like(flat) if grad is None
                    else grad.detach().reshape(-1))
        for idx in range(flat.numel()):
            original = flat[idx].item()
            with torch.no_grad():
                flat[idx] = original + step
                f_plus = float(loss_fn())
                flat[idx] = original - step
                f_minus = float(loss_fn())
                flat[idx] = original
            fd = (f_plus - f_minus) / (2.0 * step)
            a = float(analytic[idx])
            worst = max(worst, abs(a - fd) / max(abs(a), abs(fd), 1e-12))
    return worst


# ---- dataset-level evaluation -------------------------------------------


def predict_probabilities(seg_net: torch.nn.Module, image: np.ndarray) -> np.ndarray:
    """(H, W, 3) image -> (H, W, C) probability map, without gradients."""
    x = torch.from_numpy(np.transpose(image, (2, 0, 1))[None].astype(np.float32))
    with torch.no_grad():
        prob = seg_net(x)
    return np.transpose(prob[0].numpy(), (1, 2, 0))


def predict_confidence(disc_net: torch.nn.Module, prob_hwc: np.ndarray) -> np.ndarray:
    """(H, W, C) probability map -> (H, W) confidence map, without gradients."""
    x = torch.from_numpy(np.transpose(prob_hwc, (2, 0, 1))[None].astype(np.float32))
    with torch.no_grad():
        if disc_net.cfg.fully_convolutional:
            conf = disc_net(x)[0, 0].numpy()
        else:
            value = float(disc_net.forward_global(x)[0, 0])
            conf = np.full(prob_hwc.shape[:2], value, dtype=np.float32)
    return conf


def evaluate_samples(seg_net: torch.nn.Module, samples: Sequence[Sample],
                     num_classes: int):
    """Accumulate a confusion matrix over labeled samples; returns
    (matrix, per_class_iou, mean_iou_value)."""
    total = np.zeros((num_classes, num_classes), dtype=np.int64)
    n_labeled = 0
    for s in samples:
        if s.label is None:
            continue
        n_labeled += 1
        prob = predict_probabilities(seg_net, s.image)
        pred = argmax_labels(prob)
        total += confusion(pred, s.label, num_classes)
    if n_labeled == 0:
        raise ValueError("no labeled samples to evaluate")
    per_class, mean = mean_iou(total)
    return total, per_class, mean


def selected_pixel_report(seg_net: torch.nn.Module, disc_net: torch.nn.Module,
                          samples: Sequence[Sample],
                          thresholds: Sequence[float]) -> list:
    """Rows of (t_semi, fraction_selected, accuracy-or-None) over a dataset."""
    preds, confs, gts = [], [], []
    for s in samples:
        if s.label is None:
            continue
        prob = predict_probabilities(seg_net, s.image)
        preds.append(argmax_labels(prob).reshape(-1))
        confs.append(predict_confidence(disc_net, prob).reshape(-1))
        gts.append(s.label.reshape(-1))
    if not preds:
        raise ValueError("no labeled samples to evaluate")
    pred = np.concatenate(preds)
    conf = np.concatenate(confs)
    gt = np.concatenate(gts)
    rows = []
    for t in thresholds:
        fraction, accuracy = selected_pixel_stats(conf, pred, gt, t)
        rows.append((float(t), fraction, accuracy))
    return rows


def write_metrics_csv(per_class: Sequence, mean: float, path) -> None:
    """CSV rows of `class,iou` (empty IoU for excluded classes) plus the mean."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["class", "iou"])
        for cls, value in enumerate(per_class):
            writer.writerow([cls, "" if value is None else repr(float(value))])
        writer.writerow(["mean", repr(float(mean))])


def write_selected_csv(rows: Sequence, path) -> None:
    """Selected-pixel report with columns t_semi, selected_pct, accuracy."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t_semi", "selected_pct", "accuracy"])
        for t, fraction, accuracy in rows:
            writer.writerow([
                repr(float(t)),
                repr(float(100.0 * fraction)),
                "" if accuracy is None else repr(float(accuracy)),
            ])
