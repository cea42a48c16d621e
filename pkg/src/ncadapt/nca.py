"""Multi-scale neural cellular automaton backbone.

The model is a stack of NCA levels running coarse to fine. Every level owns a
depthwise perception convolution (kernel + bias) and a bias-free two-layer
update MLP applied per cell. One step computes

    s' = s + fire_mask * mlp2(relu(mlp1([s, conv(s)])))

and a level rolls that step out a fixed number of times with a fresh
Bernoulli fire mask per step. Between levels the full cell state is
nearest-neighbor upsampled and the image channel is overwritten with the
image at the finer scale. Channel 0 carries the input image, channel 1 the
output logit, the rest is hidden memory.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import (
    Rng,
    Tensor,
    add,
    bernoulli_mask,
    concat_channels,
    conv_depthwise,
    crop_spatial,
    downsample_mean,
    masked_residual,
    pointwise_dense,
    relu,
    reshape,
    slice_channels,
    upsample_nearest,
)

IMAGE_CHANNEL = 0
LOGIT_CHANNEL = 1


@dataclass(frozen=True)
class ArchConfig:
    """Architecture of the backbone and its adapter sockets."""

    channels: int = 16
    hidden: int = 68
    levels: int = 2
    kernels: tuple = (7, 3)
    steps: tuple = (10, 10)
    coarse_factor: int = 4
    fire_rate: float = 0.5
    rank: int = 2
    adapter_width: int = 6
    adapter_position: str = "update"  # or "state"
    padding: str = "zero"

    def __post_init__(self):
        if self.levels < 1:
            raise ValueError("levels must be >= 1")
        if len(self.kernels) != self.levels or len(self.steps) != self.levels:
            raise ValueError("kernels and steps must list one entry per level")
        for k in self.kernels:
            if k < 1 or k % 2 == 0:
                raise ValueError(f"kernel widths must be odd, got {self.kernels}")
        for s in self.steps:
            if s < 1:
                raise ValueError("steps per level must be >= 1")
        if not 0.0 < self.fire_rate <= 1.0:
            raise ValueError("fire rate must be in (0, 1]")
        if self.rank not in (2, 3):
            raise ValueError("spatial rank must be 2 or 3")
        if self.channels < 2:
            raise ValueError("need at least image + logit channels")
        if self.coarse_factor < 1:
            raise ValueError("coarse factor must be >= 1")
        if self.adapter_width < 1:
            raise ValueError("adapter width must be >= 1")
        if self.adapter_position not in ("update", "state"):
            raise ValueError(f"unknown adapter position {self.adapter_position!r}")
        if self.padding not in ("zero", "edge"):
            raise ValueError(f"unknown padding {self.padding!r}")

    def scale_of(self, level: int) -> int:
        return self.coarse_factor ** (self.levels - 1 - level)


class Param:
    """Named model tensor with a trainable flag; values rebind on update."""

    __slots__ = ("name", "value", "trainable", "owner")

    def __init__(self, name: str, value: Tensor, trainable: bool = True, owner: str = "backbone"):
        self.name = name
        self.value = value
        self.trainable = trainable
        self.owner = owner

    @property
    def size(self) -> int:
        return self.value.size

    def __repr__(self):
        flag = "train" if self.trainable else "frozen"
        return f"Param({self.name}, {tuple(self.value.shape)}, {flag})"


@dataclass
class LevelParams:
    kernel: Param
    bias: Param
    mlp1: Param
    mlp2: Param
    steps: int
    scale: int
    width: int

    def params(self):
        return [self.kernel, self.bias, self.mlp1, self.mlp2]


def level_param_count(config: ArchConfig, level: int) -> int:
    c, h = config.channels, config.hidden
    taps = config.kernels[level] ** config.rank
    return c * (taps + 1) + 2 * c * h + h * c


def backbone_param_count(config: ArchConfig) -> int:
    return sum(level_param_count(config, i) for i in range(config.levels))


def perception_param_count(config: ArchConfig) -> int:
    c = config.channels
    return sum(c * (k ** config.rank + 1) for k in config.kernels)


def adapter_param_count(config: ArchConfig) -> int:
    return config.levels * 2 * config.channels * config.adapter_width


def init_backbone(config: ArchConfig, rng: Rng) -> list:
    """Fresh backbone; the second MLP layer starts at zero so the initial
    model is the identity map regardless of fire masks."""
    c, h = config.channels, config.hidden
    levels = []
    for i in range(config.levels):
        k = config.kernels[i]
        taps = k ** config.rank
        kb = 1.0 / math.sqrt(taps)
        mb = 1.0 / math.sqrt(2 * c)
        levels.append(
            LevelParams(
                kernel=Param(f"backbone.l{i}.kernel",
                             Tensor.uniform([c, taps], -kb, kb, rng.derive("init", i, "kernel"))),
                bias=Param(f"backbone.l{i}.bias", Tensor.zeros([c])),
                mlp1=Param(f"backbone.l{i}.mlp1",
                           Tensor.uniform([h, 2 * c], -mb, mb, rng.derive("init", i, "mlp1"))),
                mlp2=Param(f"backbone.l{i}.mlp2", Tensor.zeros([c, h])),
                steps=config.steps[i],
                scale=config.scale_of(i),
                width=k,
            )
        )
    return levels


def seed_state(image, config: ArchConfig) -> Tensor:
    """Cell state with the image in channel 0 and everything else zero."""
    img = image if isinstance(image, Tensor) else Tensor(np.asarray(image, dtype=np.float32))
    if len(img.shape) != config.rank:
        raise ValueError(f"image rank {len(img.shape)} != spatial rank {config.rank}")
    lo, hi = float(img.data.min()), float(img.data.max())
    if lo < -1e-5 or hi > 1.0 + 1e-5:
        raise ValueError(f"image must be normalized to [0, 1], got range [{lo}, {hi}]")
    plane = reshape(img, (1,) + tuple(img.shape))
    hidden = Tensor.zeros((config.channels - 1,) + tuple(img.shape), dtype=img.dtype)
    return concat_channels([plane, hidden])


def perceive(state: Tensor, kernel: Tensor, bias: Tensor, padding: str = "zero",
             widths=None) -> Tensor:
    """State concatenated with its per-channel neighborhood response: [2C, *S]."""
    return concat_channels([state, conv_depthwise(state, kernel, bias, padding=padding,
                                                  widths=widths)])


def bottleneck_residual(h: Tensor, down: Tensor, up: Tensor) -> Tensor:
    """h + up(relu(down(h))) with bias-free pointwise maps."""
    return add(h, pointwise_dense(relu(pointwise_dense(h, down)), up))


def nca_step(state: Tensor, level: LevelParams, fire_mask: Tensor,
             adapter_pair=None, adapter_position: str = "update",
             perception=None, padding: str = "zero", batched: bool = False) -> Tensor:
    """One masked residual update; `perception` overrides the level's own
    conv (used by per-domain perception copies). With batched=True the state
    carries a leading sample axis after the channel axis and the conv window
    stays width 1 there."""
    kernel, bias = perception if perception is not None else (level.kernel.value, level.bias.value)
    rank = len(state.shape) - (2 if batched else 1)
    widths = (1,) + (level.width,) * rank if batched else None
    z = perceive(state, kernel, bias, padding=padding, widths=widths)
    h = relu(pointwise_dense(z, level.mlp1.value))
    u = pointwise_dense(h, level.mlp2.value)
    if adapter_pair is not None and adapter_position == "update":
        u = bottleneck_residual(u, adapter_pair[0], adapter_pair[1])
    out = masked_residual(state, u, fire_mask)
    if adapter_pair is not None and adapter_position == "state":
        out = bottleneck_residual(out, adapter_pair[0], adapter_pair[1])
    return out


def nca_rollout(state: Tensor, level: LevelParams, rng: Rng, fire_rate: float,
                adapter_pair=None, adapter_position: str = "update",
                perception=None, padding: str = "zero", batched: bool = False) -> Tensor:
    """Apply the update rule level.steps times with fresh fire masks."""
    spatial = state.shape[1:]
    for _ in range(level.steps):
        mask = bernoulli_mask(spatial, fire_rate, rng)
        state = nca_step(state, level, mask, adapter_pair, adapter_position,
                         perception, padding, batched)
    return state


def _ceil_div(a: int, b: int) -> int:
    return -(-a // b)


def m3d_forward(levels, config: ArchConfig, image, rng: Rng,
                adapter=None, perception=None, batched: bool = False) -> Tensor:
    """Coarse-to-fine forward pass returning the logit map at image resolution.

    `adapter` is an optional per-level list of (down, up) tensors applied
    inside every step; `perception` optionally replaces the backbone
    perception convs per level. With batched=True, `image` is a stack of
    same-shape images [B, *S] and so is the returned logit map; samples never
    interact. The segmentation is sigmoid(logits) > 0.5.
    """
    img = image if isinstance(image, Tensor) else Tensor(np.asarray(image, dtype=np.float32))
    expected_rank = config.rank + (1 if batched else 0)
    if len(img.shape) != expected_rank:
        raise ValueError(f"image rank {len(img.shape)} != spatial rank {expected_rank}")
    full = tuple(img.shape[1:]) if batched else tuple(img.shape)
    lead = (img.shape[0],) if batched else ()
    coarse_scale = config.scale_of(0)
    if min(full) < coarse_scale:
        raise ValueError(f"image extents {full} smaller than coarse scale {coarse_scale}")
    lo, hi = float(img.data.min()), float(img.data.max())
    if lo < -1e-5 or hi > 1.0 + 1e-5:
        raise ValueError(f"image must be normalized to [0, 1], got range [{lo}, {hi}]")

    plane = reshape(img, (1,) + lead + full)
    state = None
    for i, level in enumerate(levels):
        scale = config.scale_of(i)
        factors = (1,) * len(lead) + (scale,) * len(full)
        extents = lead + tuple(_ceil_div(e, scale) for e in full)
        img_i = downsample_mean(plane, factors)
        adapter_pair = adapter[i] if adapter is not None else None
        perc = perception[i] if perception is not None else None
        if i == 0:
            seeded = concat_channels(
                [img_i, Tensor.zeros((config.channels - 1,) + extents, dtype=img.dtype)]
            )
        else:
            step_up = config.scale_of(i - 1) // scale
            grown = upsample_nearest(state, (1,) * len(lead) + (step_up,) * len(full))
            if grown.shape[1:] != extents:
                grown = crop_spatial(grown, extents)
            seeded = concat_channels([img_i, slice_channels(grown, 1, config.channels)])
        state = nca_rollout(seeded, level, rng, config.fire_rate, adapter_pair,
                            config.adapter_position, perc, config.padding, batched)
    logits = slice_channels(state, LOGIT_CHANNEL, LOGIT_CHANNEL + 1)
    return reshape(logits, lead + full)
