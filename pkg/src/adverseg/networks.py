"""Segmentation and discriminator networks.

The segmentation network is a desk-scale fully convolutional net honoring an
output-stride-8 contract: a stride-2 stem, four conv blocks with strides
(2, 2, 1, 1) and growing dilations, a multi-dilation prediction head whose
branch logits are summed, bilinear upsampling back to the input size, and a
per-pixel softmax. Any backbone with the same forward contract can replace it.

The discriminator is a 5-layer patch classifier: 4x4 kernels, stride 2,
padding 1, channel widths (b, 2b, 4b, 8b, 1), Leaky-ReLU slope 0.2 after the
first four stages, no normalization layers anywhere. The final map goes
through a sigmoid and is bilinearly upsampled to the input size, giving one
real/fake probability per pixel. A non-fully-convolutional variant replaces
the last convolution with a dense layer that emits a single probability.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Tuple

import torch
import torch.nn.functional as F
from torch import nn

from .maps import LOG_EPS

# Stage strides of the segmentation backbone; the stem contributes another
# factor of 2, so the feature grid sits at 1/8 of the input resolution.
_BLOCK_STRIDES = (2, 2, 1, 1)

MIN_DISC_INPUT = 32  # keeps the deepest discriminator stage at >= 1x1

CHECKPOINT_VERSION = 1


class InputTooSmallError(ValueError):
    """Input spatial size is below the network's minimum."""


class ConfigError(ValueError):
    """Invalid or inconsistent network configuration."""


@dataclass
class SegNetConfig:
    class_count: int
    base_channels: int = 16
    block_dilations: Tuple[int, ...] = (1, 1, 2, 4)
    output_stride: int = 8
    pyramid_dilations: Tuple[int, ...] = (1, 2, 4)

    def __post_init__(self) -> None:
        if self.class_count < 2:
            raise ConfigError("class_count must be >= 2")
        if self.base_channels < 1:
            raise ConfigError("base_channels must be >= 1")
        if self.output_stride != 8:
            raise ConfigError("this backbone implements output stride 8 only")
        if len(self.block_dilations) != len(_BLOCK_STRIDES):
            raise ConfigError(f"need {len(_BLOCK_STRIDES)} block dilations")
        if not self.pyramid_dilations:
            raise ConfigError("pyramid_dilations must be non-empty")


@dataclass
class DiscNetConfig:
    class_count: int
    base_channels: int = 64  # stage widths (64, 128, 256, 512, 1)
    kernel: int = 4
    stride: int = 2
    leaky_slope: float = 0.2
    fully_convolutional: bool = True
    input_hw: Optional[Tuple[int, int]] = None  # required for the dense variant

    def __post_init__(self) -> None:
        if self.class_count < 2:
            raise ConfigError("class_count must be >= 2")
        if self.base_channels < 1:
            raise ConfigError("base_channels must be >= 1")
        if not self.fully_convolutional and self.input_hw is None:
            raise ConfigError("the dense variant needs a fixed input_hw")

    @property
    def channels(self) -> Tuple[int, ...]:
        b = self.base_channels
        return (b, 2 * b, 4 * b, 8 * b, 1)


def conv_output_size(n: int, kernel: int = 4, stride: int = 2, padding: int = 1) -> int:
    return (n + 2 * padding - kernel) // stride + 1


class SegmentationNet(nn.Module):
    """Image (N, 3, H, W) in [0,1] -> per-pixel class probabilities (N, C, H, W).

    Backbone convolutions are followed by group normalization (statistics per
    sample, so the forward pass stays a pure function) to keep activation
    scales healthy at small widths; the prediction head emits raw logits.
    """

    def __init__(self, cfg: SegNetConfig):
        super().__init__()
        self.cfg = cfg
        b = cfg.base_channels
        widths = (b, 2 * b, 4 * b, 4 * b)
        self.stem = nn.Conv2d(3, b, kernel_size=3, stride=2, padding=1)
        self.stem_norm = nn.GroupNorm(1, b)
        blocks = []
        in_ch = b
        for width, stride, dilation in zip(widths, _BLOCK_STRIDES, cfg.block_dilations):
            blocks.append(nn.Sequential(
                nn.Conv2d(in_ch, width, kernel_size=3, stride=stride,
                          padding=dilation, dilation=dilation),
                nn.GroupNorm(1, width),
                nn.ReLU(inplace=True),
                nn.Conv2d(width, width, kernel_size=3, padding=dilation,
                          dilation=dilation),
                nn.GroupNorm(1, width),
                nn.ReLU(inplace=True),
            ))
            in_ch = width
        self.blocks = nn.ModuleList(blocks)
        self.head = nn.ModuleList([
            nn.Conv2d(in_ch, cfg.class_count, kernel_size=3, padding=d, dilation=d)
            for d in cfg.pyramid_dilations
        ])

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h, w = x.shape[-2:]
        if h < self.cfg.output_stride or w < self.cfg.output_stride:
            raise InputTooSmallError(
                f"input {h}x{w} below minimum {self.cfg.output_stride}"
            )
        feat = F.relu(self.stem_norm(self.stem(x)))
        for block in self.blocks:
            feat = block(feat)
        logits = self.head[0](feat)
        for branch in self.head[1:]:
            logits = logits + branch(feat)
        logits = F.interpolate(logits, size=(h, w), mode="bilinear",
                               align_corners=True)
        return torch.softmax(logits, dim=1)


class Discriminator(nn.Module):
    """Probability map (N, C, H, W) -> per-pixel confidence it is ground truth.

    The fully convolutional variant returns an (N, 1, H, W) confidence map;
    the dense variant returns one (N, 1) probability for the whole map.
    """

    def __init__(self, cfg: DiscNetConfig):
        super().__init__()
        self.cfg = cfg
        chans = cfg.channels
        in_ch = cfg.class_count
        convs = []
        n_convs = len(chans) if cfg.fully_convolutional else len(chans) - 1
        for out_ch in chans[:n_convs]:
            convs.append(nn.Conv2d(in_ch, out_ch, kernel_size=cfg.kernel,
                                   stride=cfg.stride, padding=1))
            in_ch = out_ch
        self.convs = nn.ModuleList(convs)
        self.dense = None
        if not cfg.fully_convolutional:
            h, w = cfg.input_hw
            for _ in range(len(convs)):
                h, w = (conv_output_size(h, cfg.kernel, cfg.stride),
                        conv_output_size(w, cfg.kernel, cfg.stride))
            if h < 1 or w < 1:
                raise ConfigError(f"input_hw {cfg.input_hw} too small for 4 stages")
            self.dense = nn.Linear(in_ch * h * w, 1)

    def _check_input(self, x: torch.Tensor) -> None:
        if x.shape[1] != self.cfg.class_count:
            raise ConfigError(
                f"input has {x.shape[1]} channels, configured for "
                f"{self.cfg.class_count} classes"
            )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if not self.cfg.fully_convolutional:
            raise ConfigError("configured as dense; use forward_global")
        self._check_input(x)
        h, w = x.shape[-2:]
        if h < MIN_DISC_INPUT or w < MIN_DISC_INPUT:
            raise InputTooSmallError(
                f"input {h}x{w} below minimum {MIN_DISC_INPUT}x{MIN_DISC_INPUT}"
            )
        feat = x
        for conv in self.convs[:-1]:
            feat = F.leaky_relu(conv(feat), negative_slope=self.cfg.leaky_slope)
        conf = torch.sigmoid(self.convs[-1](feat))
        conf = F.interpolate(conf, size=(h, w), mode="bilinear", align_corners=True)
        return conf.clamp(LOG_EPS, 1.0 - LOG_EPS)

    def forward_global(self, x: torch.Tensor) -> torch.Tensor:
        if self.cfg.fully_convolutional:
            raise ConfigError("configured as fully convolutional; use forward")
        self._check_input(x)
        if tuple(x.shape[-2:]) != tuple(self.cfg.input_hw):
            raise ValueError(
                f"dense discriminator is fixed to {self.cfg.input_hw}, "
                f"got {tuple(x.shape[-2:])}"
            )
        feat = x
        for conv in self.convs:
            feat = F.leaky_relu(conv(feat), negative_slope=self.cfg.leaky_slope)
        score = self.dense(feat.flatten(1))
        return torch.sigmoid(score).clamp(LOG_EPS, 1.0 - LOG_EPS)


def _init_module(module: nn.Module, generator: torch.Generator) -> None:
    """He-style init: zero-mean normals with fan-in based std, zero biases."""
    for m in module.modules():
        if isinstance(m, nn.Conv2d):
            fan_in = m.in_channels * m.kernel_size[0] * m.kernel_size[1]
            with torch.no_grad():
                m.weight.normal_(0.0, math.sqrt(2.0 / fan_in), generator=generator)
                m.bias.zero_()
        elif isinstance(m, nn.Linear):
            with torch.no_grad():
                m.weight.normal_(0.0, math.sqrt(2.0 / m.in_features),
                                 generator=generator)
                m.bias.zero_()


def build_segmentation_network(cfg: SegNetConfig, seed: int) -> SegmentationNet:
    net = SegmentationNet(cfg)
    _init_module(net, torch.Generator().manual_seed(seed))
    return net


def build_discriminator(cfg: DiscNetConfig, seed: int) -> Discriminator:
    net = Discriminator(cfg)
    _init_module(net, torch.Generator().manual_seed(seed))
    return net


def scale_scheme(onehot: torch.Tensor, prob: torch.Tensor,
                 alpha: float) -> torch.Tensor:
    """Diffuse one-hot ground truth toward the predicted distribution.

    Returns (1 - alpha) * onehot + alpha * prob, a valid probability map for
    alpha in [0, 1]. alpha = 0 (the default everywhere) returns the one-hot
    input unchanged.
    """
    if onehot.shape != prob.shape:
        raise ValueError(f"shape mismatch {tuple(onehot.shape)} vs {tuple(prob.shape)}")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha {alpha} outside [0, 1]")
    if alpha == 0.0:
        return onehot
    return (1.0 - alpha) * onehot + alpha * prob


_KIND_TO_CONFIG = {"segmentation": SegNetConfig, "discriminator": DiscNetConfig}


def save_network(net: nn.Module, path, kind: str) -> None:
    """Write a versioned checkpoint: config echo + named parameter arrays."""
    if kind not in _KIND_TO_CONFIG:
        raise ValueError(f"unknown network kind {kind!r}")
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "kind": kind,
        "config": _config_to_dict(net.cfg),
        "state": net.state_dict(),
    }
    torch.save(payload, path)


def load_network(path, kind: str) -> nn.Module:
    """Rebuild a network from a checkpoint written by :func:`save_network`."""
    payload = torch.load(path, map_location="cpu", weights_only=False)
    _check_payload(payload, kind)
    cfg = config_from_dict(_KIND_TO_CONFIG[kind], payload["config"])
    net = SegmentationNet(cfg) if kind == "segmentation" else Discriminator(cfg)
    net.load_state_dict(payload["state"])
    return net


def _check_payload(payload, kind: str) -> None:
    if not isinstance(payload, dict) or "format_version" not in payload:
        raise ConfigError("not a network checkpoint")
    if payload["format_version"] != CHECKPOINT_VERSION:
        raise ConfigError(
            f"checkpoint version {payload['format_version']} unsupported "
            f"(expected {CHECKPOINT_VERSION})"
        )
    if payload.get("kind") != kind:
        raise ConfigError(f"checkpoint holds {payload.get('kind')!r}, expected {kind!r}")


def _config_to_dict(cfg) -> dict:
    out = asdict(cfg)
    for key, value in out.items():
        if isinstance(value, tuple):
            out[key] = list(value)
    return out


def config_from_dict(cls, raw: dict):
    """Rebuild a config dataclass, rejecting unknown keys."""
    names = {f.name for f in cls.__dataclass_fields__.values()}
    unknown = set(raw) - names
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kwargs = dict(raw)
    for key, value in kwargs.items():
        if isinstance(value, list):
            kwargs[key] = tuple(value)
    return cls(**kwargs)
