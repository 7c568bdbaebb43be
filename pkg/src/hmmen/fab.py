"""Feature alignment block built on deformable convolution.

The half-resolution decoder feature is upsampled, channel-reduced, and
concatenated with the current-level RGB/IR features to predict two offset
fields; deformable 3x3 convolutions then warp the reduced decoder feature and
the IR feature onto the RGB feature, and the three are summed:

    f_align = f_rgb + deform(f_llc, d_llc) + deform(f_ir, d_ir)

At the lowest pyramid level there is no decoder feature yet, so only the IR
branch exists and offsets come from concat(f_rgb, f_ir).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import torch

from .deform import deform_conv2d
from .errors import ContractViolation
from .numerics import (ConvSpec, FeatureMap, ParameterStore, conv2d, init_conv,
                       relu, resize_bilinear)

OffsetHook = Callable[[FeatureMap], FeatureMap]


@dataclass
class FabState:
    f_llc: FeatureMap | None
    delta_llc: FeatureMap | None
    delta_ir: FeatureMap
    f_auf: FeatureMap | None
    f_aif: FeatureMap
    f_align: FeatureMap


def init_fab(store: ParameterStore, prefix: str, dec_channels: int,
             channels: int, gen: torch.Generator) -> None:
    c = channels
    init_conv(store, prefix + ".reduce", dec_channels, c, (1, 1), gen)
    init_conv(store, prefix + ".off1", 3 * c, c, (3, 3), gen)
    # zero init: training starts in the plain-convolution regime
    init_conv(store, prefix + ".off2", c, 36, (3, 3), gen, zero=True)
    init_conv(store, prefix + ".deform_llc", c, c, (3, 3), gen)
    init_conv(store, prefix + ".deform_ir", c, c, (3, 3), gen)


def init_fab_lowest(store: ParameterStore, prefix: str, channels: int,
                    gen: torch.Generator) -> None:
    c = channels
    init_conv(store, prefix + ".off1", 2 * c, c, (3, 3), gen)
    init_conv(store, prefix + ".off2", c, 18, (3, 3), gen, zero=True)
    init_conv(store, prefix + ".deform_ir", c, c, (3, 3), gen)


def _offset_trunk(feats: FeatureMap, store: ParameterStore, prefix: str,
                  in_ch: int, c: int, out_ch: int) -> FeatureMap:
    h = conv2d(feats, ConvSpec(in_ch, c, (3, 3), padding=(1, 1)),
               store[prefix + ".off1.w"], store[prefix + ".off1.b"])
    h = relu(h)
    return conv2d(h, ConvSpec(c, out_ch, (3, 3), padding=(1, 1)),
                  store[prefix + ".off2.w"], store[prefix + ".off2.b"])


def fab_forward(f_dec: FeatureMap, f_rgb: FeatureMap, f_ir: FeatureMap,
                store: ParameterStore, prefix: str,
                offset_hook: OffsetHook | None = None,
                return_state: bool = False):
    """Align the decoder and IR features to the RGB feature and fuse them."""
    if f_rgb.shape != f_ir.shape:
        raise ContractViolation(
            f"modality shapes differ: {tuple(f_rgb.shape)} vs {tuple(f_ir.shape)}")
    n, c, h, w = f_rgb.shape
    if f_dec.shape[0] != n or f_dec.shape[2] * 2 != h or f_dec.shape[3] * 2 != w:
        raise ContractViolation(
            f"decoder feature {tuple(f_dec.shape)} is not at half the resolution "
            f"of the level feature {tuple(f_rgb.shape)}")
    up = resize_bilinear(f_dec, h, w)
    f_llc = conv2d(up, ConvSpec(f_dec.shape[1], c, (1, 1)),
                   store[prefix + ".reduce.w"], store[prefix + ".reduce.b"])
    off = _offset_trunk(torch.cat([f_llc, f_rgb, f_ir], dim=1), store, prefix,
                        3 * c, c, 36)
    delta_llc, delta_ir = off[:, :18], off[:, 18:]
    if offset_hook is not None:
        delta_llc = offset_hook(delta_llc)
        delta_ir = offset_hook(delta_ir)
    spec = ConvSpec(c, c, (3, 3), padding=(1, 1))
    f_auf = deform_conv2d(f_llc, delta_llc, store[prefix + ".deform_llc.w"],
                          store[prefix + ".deform_llc.b"], spec)
    f_aif = deform_conv2d(f_ir, delta_ir, store[prefix + ".deform_ir.w"],
                          store[prefix + ".deform_ir.b"], spec)
    f_align = f_rgb + f_auf + f_aif
    if return_state:
        return FabState(f_llc, delta_llc, delta_ir, f_auf, f_aif, f_align)
    return f_align


def fab_forward_lowest(f_rgb: FeatureMap, f_ir: FeatureMap,
                       store: ParameterStore, prefix: str,
                       offset_hook: OffsetHook | None = None,
                       return_state: bool = False):
    """Deepest-level variant: aligns only the IR feature (no decoder input)."""
    if f_rgb.shape != f_ir.shape:
        raise ContractViolation(
            f"modality shapes differ: {tuple(f_rgb.shape)} vs {tuple(f_ir.shape)}")
    c = f_rgb.shape[1]
    delta_ir = _offset_trunk(torch.cat([f_rgb, f_ir], dim=1), store, prefix,
                             2 * c, c, 18)
    if offset_hook is not None:
        delta_ir = offset_hook(delta_ir)
    spec = ConvSpec(c, c, (3, 3), padding=(1, 1))
    f_aif = deform_conv2d(f_ir, delta_ir, store[prefix + ".deform_ir.w"],
                          store[prefix + ".deform_ir.b"], spec)
    f_align = f_rgb + f_aif
    if return_state:
        return FabState(None, None, delta_ir, None, f_aif, f_align)
    return f_align
