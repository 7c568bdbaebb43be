"""Decode blocks and the full-resolution prediction head.

A decode block doubles the spatial size with a kernel-2 stride-2 transposed
conv and refines with one stride-1 inverted residual.  The head returns
logits; sigmoid is applied by losses/metrics, never here.
"""

from __future__ import annotations

import torch

from .encoder import init_inverted_residual, inverted_residual
from .numerics import (ConvSpec, FeatureMap, ParameterStore, conv2d, init_conv,
                       init_tconv, relu6, transposed_conv2d)


def init_decode_block(store: ParameterStore, prefix: str, in_ch: int,
                      out_ch: int, expansion: int, gen: torch.Generator) -> None:
    init_tconv(store, prefix + ".up", in_ch, out_ch, gen)
    init_inverted_residual(store, prefix + ".refine", out_ch, out_ch, expansion, gen)


def decode_block(x: FeatureMap, store: ParameterStore, prefix: str,
                 in_ch: int, out_ch: int, expansion: int) -> FeatureMap:
    h = transposed_conv2d(x, store[prefix + ".up.w"], store[prefix + ".up.b"])
    h = relu6(h)
    return inverted_residual(h, store, prefix + ".refine", out_ch, out_ch, 1,
                             expansion)


def init_prediction_head(store: ParameterStore, prefix: str, in_ch: int,
                         gen: torch.Generator) -> None:
    init_tconv(store, prefix + ".up", in_ch, in_ch, gen)
    init_conv(store, prefix + ".out", in_ch, 1, (1, 1), gen)


def prediction_head(x: FeatureMap, store: ParameterStore, prefix: str,
                    in_ch: int) -> FeatureMap:
    """Half-resolution feature -> full-resolution single-channel logits."""
    h = transposed_conv2d(x, store[prefix + ".up.w"], store[prefix + ".up.b"])
    h = relu6(h)
    return conv2d(h, ConvSpec(in_ch, 1, (1, 1)), store[prefix + ".out.w"],
                  store[prefix + ".out.b"])
