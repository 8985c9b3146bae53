"""Array conventions and pixel-level primitives shared across the pipeline.

Everything here is plain numpy in HWC layout:

* image            ``(H, W, 3)`` float, values in ``[0, 1]``
* label map        ``(H, W)`` integer, values in ``{0..C-1}`` or ``IGNORE``
* probability map  ``(H, W, C)`` float, per-pixel channel sums equal 1
* confidence map   ``(H, W, 1)`` or ``(H, W)`` float, values inside ``(0, 1)``
* binary mask      ``(H, W)`` uint8, values in ``{0, 1}``

All operations are pure functions with no shared state.
"""

from __future__ import annotations

import numpy as np

# Label value excluded from every loss and metric (PASCAL convention).
IGNORE = 255

# Lower clamp applied to every log argument; keeps losses finite when a
# sigmoid/softmax output underflows.
LOG_EPS = 1e-8

# Per-pixel probability sums must match 1 within this tolerance.
PROB_SUM_TOL = 1e-5


class InvalidLabelError(ValueError):
    """A label map contains a value outside {0..C-1} u {IGNORE}."""


class InvalidThresholdError(ValueError):
    """A confidence threshold lies outside [0, 1]."""


class ShapeMismatchError(ValueError):
    """Two maps that must share a shape do not."""


def validate_probability_map(probs: np.ndarray) -> None:
    """Raise ValueError unless ``probs`` is a well-formed (H, W, C) map."""
    probs = np.asarray(probs)
    if probs.ndim != 3:
        raise ValueError(f"probability map must be (H, W, C), got shape {probs.shape}")
    if probs.min() < 0.0 or probs.max() > 1.0:
        raise ValueError("probability map values must lie in [0, 1]")
    sums = probs.sum(axis=-1)
    err = np.abs(sums - 1.0).max()
    if err > PROB_SUM_TOL:
        raise ValueError(f"per-pixel sums deviate from 1 by {err:.2e} (> {PROB_SUM_TOL})")


def validate_confidence_map(conf: np.ndarray) -> None:
    """Raise ValueError unless ``conf`` holds values strictly inside (0, 1)."""
    conf = np.asarray(conf)
    if conf.ndim == 3 and conf.shape[-1] != 1:
        raise ValueError(f"confidence map must have one channel, got shape {conf.shape}")
    if conf.min() <= 0.0 or conf.max() >= 1.0:
        raise ValueError("confidence values must lie strictly inside (0, 1)")


def one_hot_encode(labels: np.ndarray, num_classes: int) -> np.ndarray:
    """Encode an (H, W) label map as an (H, W, C) one-hot map.

    IGNORE pixels come out all-zero so they contribute nothing to spatial
    loss sums.
    """
    labels = np.asarray(labels)
    ignored = labels == IGNORE
    bad = ~ignored & ((labels < 0) | (labels >= num_classes))
    if bad.any():
        value = int(labels[bad].flat[0])
        raise InvalidLabelError(f"label value {value} outside 0..{num_classes - 1}")
    out = np.zeros((*labels.shape, num_classes), dtype=np.float32)
    valid = ~ignored
    out[valid, labels[valid].astype(np.intp)] = 1.0
    return out


def argmax_labels(probs: np.ndarray) -> np.ndarray:
    """Per-pixel argmax over channels; ties resolve to the smallest class."""
    probs = np.asarray(probs)
    return np.argmax(probs, axis=-1).astype(np.int64)


def threshold_mask(conf: np.ndarray, threshold: float) -> np.ndarray:
    """Binary mask of pixels whose confidence is strictly above ``threshold``."""
    if not 0.0 <= threshold <= 1.0:
        raise InvalidThresholdError(f"threshold {threshold} outside [0, 1]")
    conf = np.asarray(conf)
    if conf.ndim == 3:
        conf = conf[..., 0]
    return (conf > threshold).astype(np.uint8)


def _interp_rows(arr: np.ndarray, out_len: int) -> np.ndarray:
    """Corner-aligned linear interpolation along axis 0."""
    n = arr.shape[0]
    if out_len == n:
        return arr
    if n == 1 or out_len == 1:
        # Single source row extends as a constant; single output row samples
        # the first source row (corner-aligned convention).
        return np.repeat(arr[:1], out_len, axis=0)
    pos = np.linspace(0.0, n - 1.0, out_len)
    lo = np.clip(np.floor(pos).astype(np.intp), 0, n - 2)
    frac = (pos - lo).reshape((out_len,) + (1,) * (arr.ndim - 1))
    return arr[lo] * (1.0 - frac) + arr[lo + 1] * frac


def resize_bilinear(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize an (H, W) or (H, W, C) array with corner-aligned bilinear sampling.

    Endpoints map to endpoints, so a 2-point row [a, b] resized to 3 points
    gives [a, (a+b)/2, b], constants stay constant, and a same-size resize
    returns the input values exactly.
    """
    if out_h < 1 or out_w < 1:
        raise ValueError("target size must be at least 1x1")
    arr = np.asarray(arr, dtype=np.float64)
    if arr.shape[:2] == (out_h, out_w):
        return arr.copy()
    out = _interp_rows(arr, out_h)
    out = _interp_rows(out.swapaxes(0, 1), out_w).swapaxes(0, 1)
    return np.ascontiguousarray(out)


def resize_nearest(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Nearest-neighbor resize under the same corner-aligned grid."""
    if out_h < 1 or out_w < 1:
        raise ValueError("target size must be at least 1x1")
    arr = np.asarray(arr)
    h, w = arr.shape[:2]
    if (h, w) == (out_h, out_w):
        return arr.copy()
    ys = _nearest_indices(h, out_h)
    xs = _nearest_indices(w, out_w)
    return arr[np.ix_(ys, xs)]


def _nearest_indices(n: int, out_len: int) -> np.ndarray:
    if out_len == 1 or n == 1:
        return np.zeros(out_len, dtype=np.intp)
    pos = np.linspace(0.0, n - 1.0, out_len)
    return np.clip(np.floor(pos + 0.5).astype(np.intp), 0, n - 1)


def bilinear_resize(map_hwc: np.ndarray, out_h: int, out_w: int,
                    renormalize: bool = False) -> np.ndarray:
    """Resize a probability or confidence map to ``out_h x out_w``.

    Pass ``renormalize=True`` for probability maps so per-pixel channel sums
    are restored to 1 after interpolation.
    """
    out = resize_bilinear(map_hwc, out_h, out_w)
    if renormalize and out.ndim == 3:
        sums = out.sum(axis=-1, keepdims=True)
        out = out / np.where(sums == 0.0, 1.0, sums)
    return out
