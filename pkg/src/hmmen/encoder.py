"""Dual-stream hierarchical encoders in the inverted-residual style.

Each stream produces a 5-level pyramid at 1/2 .. 1/32 of the input size.
The stem stage is a plain stride-2 3x3 conv + ReLU6; every later stage is one
stride-2 inverted residual followed by one stride-1 inverted residual.  The
IR stream gets a learned 1->3 channel stem so both streams share the same
architecture without sharing parameters.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import ContractViolation
from .numerics import (ConvSpec, FeatureMap, ParameterStore, check_feature_map,
                       conv2d, init_conv, relu6)


@dataclass(frozen=True)
class EncoderConfig:
    stage_channels: tuple[int, ...] = (16, 24, 32, 96, 320)
    expansion_factor: int = 6

    def __post_init__(self):
        if len(self.stage_channels) != 5:
            raise ContractViolation("encoder needs exactly 5 stages")
        if self.expansion_factor < 1:
            raise ContractViolation("expansion factor must be positive")


def init_inverted_residual(store: ParameterStore, prefix: str, in_ch: int,
                           out_ch: int, expansion: int,
                           gen: torch.Generator) -> None:
    hidden = in_ch * expansion
    init_conv(store, prefix + ".expand", in_ch, hidden, (1, 1), gen)
    init_conv(store, prefix + ".dw", hidden, hidden, (3, 3), gen, groups=hidden)
    init_conv(store, prefix + ".project", hidden, out_ch, (1, 1), gen)


def inverted_residual(x: FeatureMap, store: ParameterStore, prefix: str,
                      in_ch: int, out_ch: int, stride: int,
                      expansion: int) -> FeatureMap:
    """expand (1x1, ReLU6) -> depthwise 3x3 (ReLU6) -> project (1x1, linear).

    Residual skip iff stride 1 and in_ch == out_ch.
    """
    if stride not in (1, 2):
        raise ContractViolation(f"stride must be 1 or 2, got {stride}")
    hidden = in_ch * expansion
    h = conv2d(x, ConvSpec(in_ch, hidden, (1, 1)), store[prefix + ".expand.w"],
               store[prefix + ".expand.b"])
    h = relu6(h)
    h = F.conv2d(h, store[prefix + ".dw.w"], store[prefix + ".dw.b"],
                 stride=stride, padding=1, groups=hidden)
    h = relu6(h)
    h = conv2d(h, ConvSpec(hidden, out_ch, (1, 1)), store[prefix + ".project.w"],
               store[prefix + ".project.b"])
    if stride == 1 and in_ch == out_ch:
        h = h + x
    return h


def init_ir_stem(store: ParameterStore, prefix: str, gen: torch.Generator) -> None:
    init_conv(store, prefix, 1, 3, (3, 3), gen)


def ir_stem(ir_image: FeatureMap, store: ParameterStore, prefix: str) -> FeatureMap:
    """Learned 3x3 conv lifting the single IR channel to 3 channels."""
    check_feature_map(ir_image, "ir_image")
    if ir_image.shape[1] != 1:
        raise ContractViolation(
            f"ir_stem expects a 1-channel input, got {ir_image.shape[1]} channels")
    return conv2d(ir_image, ConvSpec(1, 3, (3, 3), padding=(1, 1)),
                  store[prefix + ".w"], store[prefix + ".b"])


def init_encoder(store: ParameterStore, prefix: str, config: EncoderConfig,
                 gen: torch.Generator) -> None:
    ch = config.stage_channels
    init_conv(store, prefix + ".stem", 3, ch[0], (3, 3), gen)
    for k in range(1, 5):
        init_inverted_residual(store, f"{prefix}.s{k}.a", ch[k - 1], ch[k],
                               config.expansion_factor, gen)
        init_inverted_residual(store, f"{prefix}.s{k}.b", ch[k], ch[k],
                               config.expansion_factor, gen)


def encode_stream(image: FeatureMap, store: ParameterStore, prefix: str,
                  config: EncoderConfig) -> list[FeatureMap]:
    """Run one encoder stream and return its 5-level pyramid."""
    check_feature_map(image, "image")
    if image.shape[1] != 3:
        raise ContractViolation(f"encoder expects 3 channels, got {image.shape[1]}")
    h, w = image.shape[2], image.shape[3]
    if h % 32 or w % 32:
        raise ContractViolation(
            f"spatial dims {h}x{w} must be divisible by 32")
    ch = config.stage_channels
    x = relu6(conv2d(image, ConvSpec(3, ch[0], (3, 3), (2, 2), (1, 1)),
                     store[prefix + ".stem.w"], store[prefix + ".stem.b"]))
    levels = [x]
    for k in range(1, 5):
        x = inverted_residual(x, store, f"{prefix}.s{k}.a", ch[k - 1], ch[k],
                              2, config.expansion_factor)
        x = inverted_residual(x, store, f"{prefix}.s{k}.b", ch[k], ch[k],
                              1, config.expansion_factor)
        levels.append(x)
    return levels
