"""Deformable 2-D convolution with learned per-location sampling offsets.

Offset fields have 2*kh*kw channels ordered tap-major with dy before dx.
Samples falling outside the image contribute exactly zero, consistent with
the zero padding used by the plain convolutions; a zero offset field makes
the operation collapse to an ordinary same-size convolution.
"""

from __future__ import annotations

import torch

from .errors import ContractViolation
from .numerics import ConvSpec, FeatureMap, check_feature_map


def bilinear_sample(x: FeatureMap, py: float, px: float, n: int, c: int) -> torch.Tensor:
    """Bilinear interpolation of one channel at a real-valued coordinate.

    Zero outside [0, H-1] x [0, W-1]; differentiable w.r.t. x and (py, px)
    when those are tensors.
    """
    check_feature_map(x)
    py = torch.as_tensor(py, dtype=x.dtype)
    px = torch.as_tensor(px, dtype=x.dtype)
    h, w = x.shape[2], x.shape[3]
    y0 = torch.floor(py)
    x0 = torch.floor(px)
    wy = py - y0
    wx = px - x0
    val = x.new_zeros(())
    corners = ((y0, x0, (1 - wy) * (1 - wx)), (y0, x0 + 1, (1 - wy) * wx),
               (y0 + 1, x0, wy * (1 - wx)), (y0 + 1, x0 + 1, wy * wx))
    for cy, cx, f in corners:
        iy = int(cy.detach().item())
        ix = int(cx.detach().item())
        if 0 <= iy < h and 0 <= ix < w:
            val = val + f * x[n, c, iy, ix]
    return val


def _gather_patches(x: FeatureMap, py: torch.Tensor, px: torch.Tensor) -> torch.Tensor:
    """Batched bilinear gather.

    x: (N, C, H, W); py, px: (N, K, Ho, Wo) absolute sample coordinates.
    Returns (N, C, K, Ho, Wo) with zeros for out-of-support samples.
    """
    n, c, h, w = x.shape
    k, ho, wo = py.shape[1], py.shape[2], py.shape[3]
    y0 = torch.floor(py)
    x0 = torch.floor(px)
    wy = py - y0
    wx = px - x0
    xf = x.reshape(n, c, h * w)
    out = x.new_zeros((n, c, k, ho, wo))
    for oy, fy in ((y0, 1 - wy), (y0 + 1, wy)):
        for ox, fx in ((x0, 1 - wx), (x0 + 1, wx)):
            inside = (oy >= 0) & (oy <= h - 1) & (ox >= 0) & (ox <= w - 1)
            iy = oy.detach().long().clamp(0, h - 1)
            ix = ox.detach().long().clamp(0, w - 1)
            idx = (iy * w + ix).reshape(n, 1, k * ho * wo).expand(n, c, -1)
            vals = torch.gather(xf, 2, idx).reshape(n, c, k, ho, wo)
            frac = (fy * fx * inside.to(x.dtype)).unsqueeze(1)
            out = out + vals * frac
    return out


def deform_conv2d(x: FeatureMap, offsets: FeatureMap, weight: torch.Tensor,
                  bias: torch.Tensor | None, spec: ConvSpec) -> FeatureMap:
    """Same-size deformable convolution (stride 1, padding (k-1)/2).

    out(n,o,i,j) = sum_c sum_tap w[o,c,tap] *
                   sample(x, i + tap_dy + dy(tap), j + tap_dx + dx(tap), n, c)

    Differentiable w.r.t. x, weight, bias and offsets.
    """
    check_feature_map(x)
    check_feature_map(offsets, "offsets")
    kh, kw = spec.kernel
    if spec.stride != (1, 1):
        raise ContractViolation("deform_conv2d requires stride 1")
    if spec.padding != ((kh - 1) // 2, (kw - 1) // 2):
        raise ContractViolation("deform_conv2d requires padding (k-1)/2")
    if offsets.shape[1] != 2 * kh * kw:
        raise ContractViolation(
            f"offset field has {offsets.shape[1]} channels, expected {2 * kh * kw}")
    if offsets.shape[2:] != x.shape[2:] or offsets.shape[0] != x.shape[0]:
        raise ContractViolation(
            f"offset field shape {tuple(offsets.shape)} does not match input "
            f"{tuple(x.shape)} (same-size output)")
    if x.shape[1] != spec.in_channels:
        raise ContractViolation(
            f"input channels {x.shape[1]} != spec.in_channels {spec.in_channels}")

    n, _, h, w = x.shape
    k = kh * kw
    taps_y = torch.arange(kh, dtype=x.dtype) - (kh - 1) // 2
    taps_x = torch.arange(kw, dtype=x.dtype) - (kw - 1) // 2
    ty = taps_y.repeat_interleave(kw).view(1, k, 1, 1)
    tx = taps_x.repeat(kh).view(1, k, 1, 1)
    gy = torch.arange(h, dtype=x.dtype).view(1, 1, h, 1)
    gx = torch.arange(w, dtype=x.dtype).view(1, 1, 1, w)
    off = offsets.reshape(n, k, 2, h, w)
    py = gy + ty + off[:, :, 0]
    px = gx + tx + off[:, :, 1]
    patches = _gather_patches(x, py, px)
    # contraction over (c, tap) as a 1x1 conv; channel-major layout matches
    # weight.reshape(out, in*k)
    out = torch.nn.functional.conv2d(
        patches.reshape(n, spec.in_channels * k, h, w),
        weight.reshape(spec.out_channels, spec.in_channels * k, 1, 1), bias)
    return out
