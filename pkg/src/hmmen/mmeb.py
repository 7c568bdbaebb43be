"""Mutual cross-modal enhancement block.

Both modality features are concatenated, pooled (max and average windows),
upsampled back, and pushed through two small sigmoid heads that produce
per-channel gate maps.  Each modality is then boosted by the other modality
weighted by its gate:

    enhanced_rgb = f_rgb + f_ir  * w_ir
    enhanced_ir  = f_ir  + f_rgb * w_rgb
"""

from __future__ import annotations

from typing import Callable

import torch

from .errors import ContractViolation
from .numerics import (ConvSpec, FeatureMap, ParameterStore, conv2d, init_conv,
                       pool2d, relu, resize_bilinear, sigmoid)

WeightHook = Callable[[FeatureMap, FeatureMap], tuple[FeatureMap, FeatureMap]]


def init_mmeb(store: ParameterStore, prefix: str, channels: int,
              gen: torch.Generator) -> None:
    for head in ("head_rgb", "head_ir"):
        init_conv(store, f"{prefix}.{head}.c1", 4 * channels, channels, (3, 3), gen)
        init_conv(store, f"{prefix}.{head}.c2", channels, channels, (3, 3), gen)


def _weight_head(f2: FeatureMap, store: ParameterStore, prefix: str,
                 channels: int) -> FeatureMap:
    h = conv2d(f2, ConvSpec(4 * channels, channels, (3, 3), padding=(1, 1)),
               store[prefix + ".c1.w"], store[prefix + ".c1.b"])
    h = relu(h)
    h = conv2d(h, ConvSpec(channels, channels, (3, 3), padding=(1, 1)),
               store[prefix + ".c2.w"], store[prefix + ".c2.b"])
    return sigmoid(h)


def mmeb_forward(f_rgb: FeatureMap, f_ir: FeatureMap, store: ParameterStore,
                 prefix: str, weight_hook: WeightHook | None = None
                 ) -> tuple[FeatureMap, FeatureMap]:
    """Produce the two mutually enhanced feature maps.

    `weight_hook`, if given, receives the computed (w_rgb, w_ir) gate maps and
    returns replacements; it exists so tests can force constant gates.
    """
    if f_rgb.shape != f_ir.shape:
        raise ContractViolation(
            f"modality shapes differ: {tuple(f_rgb.shape)} vs {tuple(f_ir.shape)}")
    _, c, h, w = f_rgb.shape
    f1 = torch.cat([f_rgb, f_ir], dim=1)
    f2 = torch.cat([pool2d(f1, "max", 3, 2, 1), pool2d(f1, "avg", 3, 2, 1)], dim=1)
    f2 = resize_bilinear(f2, h, w)
    w_rgb = _weight_head(f2, store, prefix + ".head_rgb", c)
    w_ir = _weight_head(f2, store, prefix + ".head_ir", c)
    if weight_hook is not None:
        w_rgb, w_ir = weight_hook(w_rgb, w_ir)
    ef_rgb = f_rgb + f_ir * w_ir
    ef_ir = f_ir + f_rgb * w_rgb
    return ef_rgb, ef_ir
