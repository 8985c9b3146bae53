"""Training objectives for the segmentation network and the discriminator.

Conventions shared by every loss here:

* natural logarithm, with arguments clamped to [1e-8, 1] so values stay finite
* IGNORE pixels are excluded from both the sum and the pixel count
* the spatial sum is divided by the number of contributing pixels, making the
  loss weights independent of crop size
* an empty contribution set yields a loss of exactly 0, never NaN

Tensors are channel-first with a batch dimension: probabilities and one-hot
targets are (N, C, H, W); confidence maps and masks are (N, 1, H, W).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import torch

from .maps import IGNORE, LOG_EPS, InvalidThresholdError, ShapeMismatchError


@dataclass
class HyperParams:
    """Loss weights and the self-training confidence threshold."""

    lambda_adv_labeled: float = 0.01
    lambda_adv_unlabeled: float = 0.001
    lambda_semi: float = 0.1
    t_semi: float = 0.2

    def __post_init__(self) -> None:
        for name in ("lambda_adv_labeled", "lambda_adv_unlabeled", "lambda_semi"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if not 0.0 <= self.t_semi <= 1.0:
            raise InvalidThresholdError(f"t_semi {self.t_semi} outside [0, 1]")


@dataclass
class LossValue:
    """A scalar loss tensor plus the pixel count it was averaged over."""

    value: torch.Tensor
    contributing_pixels: int

    def item(self) -> float:
        return float(self.value.detach())


def _clamped_log(x: torch.Tensor) -> torch.Tensor:
    return torch.log(x.clamp(LOG_EPS, 1.0))


def one_hot_targets(labels: torch.Tensor, num_classes: int) -> torch.Tensor:
    """Batched (N, H, W) int labels -> (N, C, H, W) float one-hot; IGNORE -> all-zero."""
    valid = labels != IGNORE
    bad = valid & ((labels < 0) | (labels >= num_classes))
    if bad.any():
        raise ValueError(
            f"label value {int(labels[bad].flatten()[0])} outside 0..{num_classes - 1}"
        )
    index = torch.where(valid, labels, torch.zeros_like(labels)).unsqueeze(1)
    out = torch.zeros(labels.shape[0], num_classes, *labels.shape[1:],
                      dtype=torch.get_default_dtype(), device=labels.device)
    out.scatter_(1, index, 1.0)
    return out * valid.unsqueeze(1)


def ignore_mask_from_labels(labels: torch.Tensor) -> torch.Tensor:
    """(N, H, W) labels -> (N, 1, H, W) bool mask of pixels to exclude."""
    return (labels == IGNORE).unsqueeze(1)


def loss_discriminator(conf: torch.Tensor, target_is_real: bool,
                       ignore: Optional[torch.Tensor] = None) -> LossValue:
    """Binary cross entropy of a confidence map against a real/fake target.

    ``target_is_real=True`` scores ground-truth inputs (per-pixel -log conf),
    ``False`` scores network predictions (-log(1 - conf)). Pixels flagged in
    ``ignore`` are dropped from the mean.
    """
    per_pixel = -_clamped_log(conf if target_is_real else 1.0 - conf)
    if ignore is not None:
        keep = ~ignore.bool()
        n = int(keep.sum())
        if n == 0:
            return LossValue(conf.new_zeros(()), 0)
        return LossValue((per_pixel * keep).sum() / n, n)
    return LossValue(per_pixel.mean(), per_pixel.numel())


def loss_ce(prob: torch.Tensor, onehot: torch.Tensor) -> LossValue:
    """Spatial multi-class cross entropy against a one-hot target.

    All-zero target pixels (the IGNORE encoding) contribute neither to the
    sum nor to the pixel count.
    """
    if prob.shape != onehot.shape:
        raise ShapeMismatchError(
            f"prob {tuple(prob.shape)} vs target {tuple(onehot.shape)}"
        )
    n = int(round(float(onehot.sum())))
    if n == 0:
        return LossValue(prob.new_zeros(()), 0)
    value = -(onehot * _clamped_log(prob)).sum() / n
    return LossValue(value, n)


def loss_adv(conf: torch.Tensor) -> LossValue:
    """Adversarial term: mean -log confidence of the prediction being real.

    Gradients flow through the discriminator into the segmentation network;
    the trainer freezes discriminator parameters for the duration.
    """
    per_pixel = -_clamped_log(conf)
    return LossValue(per_pixel.mean(), per_pixel.numel())


def build_self_taught_target(prob: torch.Tensor) -> torch.Tensor:
    """One-hot of the per-pixel argmax, detached so no gradient reaches it.

    Ties resolve to the smallest class index.
    """
    with torch.no_grad():
        index = prob.argmax(dim=1, keepdim=True)
        target = torch.zeros_like(prob)
        target.scatter_(1, index, 1.0)
    return target


def masked_self_taught_ce(prob: torch.Tensor, mask: torch.Tensor,
                          target: torch.Tensor) -> LossValue:
    """Cross entropy against a constant target, restricted to masked-in pixels."""
    if prob.shape != target.shape:
        raise ShapeMismatchError(
            f"prob {tuple(prob.shape)} vs target {tuple(target.shape)}"
        )
    mask = mask.to(prob.dtype)
    n = int(round(float(mask.sum())))
    if n == 0:
        return LossValue(prob.new_zeros(()), 0)
    value = -(mask * target * _clamped_log(prob)).sum() / n
    return LossValue(value, n)


def loss_semi(prob: torch.Tensor, conf: torch.Tensor, t_semi: float) -> LossValue:
    """Confidence-masked self-training loss.

    Pixels whose confidence is strictly above ``t_semi`` are trained toward
    the network's own argmax labels. Both the mask and the self-taught target
    are constants during differentiation; only the log-probability term
    carries gradient.
    """
    if not 0.0 <= t_semi <= 1.0:
        raise InvalidThresholdError(f"t_semi {t_semi} outside [0, 1]")
    if conf.shape[-2:] != prob.shape[-2:] or conf.shape[0] != prob.shape[0]:
        raise ShapeMismatchError(
            f"conf {tuple(conf.shape)} vs prob {tuple(prob.shape)}"
        )
    with torch.no_grad():
        mask = (conf > t_semi).to(prob.dtype)
    target = build_self_taught_target(prob)
    return masked_self_taught_ce(prob, mask, target)


def loss_seg_total(l_ce: Optional[LossValue], l_adv: Optional[LossValue],
                   l_semi: Optional[LossValue], hp: HyperParams,
                   labeled: bool) -> LossValue:
    """Combine the segmentation terms for one batch.

    Labeled batches: l_ce + lambda_adv_labeled * l_adv.
    Unlabeled batches: lambda_adv_unlabeled * l_adv + lambda_semi * l_semi.
    Absent optional terms contribute zero.
    """
    if labeled:
        if l_ce is None:
            raise ValueError("labeled batch requires a cross-entropy term")
        if l_semi is not None:
            raise ValueError("labeled batch cannot carry a semi-supervised term")
        value = l_ce.value
        pixels = l_ce.contributing_pixels
        if l_adv is not None:
            value = value + hp.lambda_adv_labeled * l_adv.value
            pixels += l_adv.contributing_pixels
        return LossValue(value, pixels)
    if l_ce is not None:
        raise ValueError("unlabeled batch cannot carry a cross-entropy term")
    terms = []
    pixels = 0
    if l_adv is not None:
        terms.append(hp.lambda_adv_unlabeled * l_adv.value)
        pixels += l_adv.contributing_pixels
    if l_semi is not None:
        terms.append(hp.lambda_semi * l_semi.value)
        pixels += l_semi.contributing_pixels
    if not terms:
        return LossValue(torch.zeros(()), 0)
    value = terms[0]
    for t in terms[1:]:
        value = value + t
    return LossValue(value, pixels)
