"""Differentiable layer primitives and the named parameter store.

Feature maps are plain torch tensors of shape (N, C, H, W); torch autograd is
the differentiable substrate behind every primitive, so analytic gradients for
all operations come from the same graph the tests check against finite
differences.
"""

from __future__ import annotations

import math
import zipfile
from dataclasses import dataclass
from typing import Iterator

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ContractViolation

FeatureMap = torch.Tensor


def check_feature_map(x: torch.Tensor, name: str = "x") -> None:
    if x.dim() != 4:
        raise ContractViolation(f"{name} must be 4-D (N, C, H, W), got {x.dim()}-D")
    if min(x.shape) < 1:
        raise ContractViolation(f"{name} has an empty dimension: {tuple(x.shape)}")


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel: tuple[int, int] = (3, 3)
    stride: tuple[int, int] = (1, 1)
    padding: tuple[int, int] = (0, 0)
    has_bias: bool = True

    def out_size(self, h: int, w: int) -> tuple[int, int]:
        oh = (h + 2 * self.padding[0] - self.kernel[0]) // self.stride[0] + 1
        ow = (w + 2 * self.padding[1] - self.kernel[1]) // self.stride[1] + 1
        if oh < 1 or ow < 1:
            raise ContractViolation(
                f"conv output size {oh}x{ow} < 1 for input {h}x{w}, "
                f"kernel {self.kernel}, stride {self.stride}, padding {self.padding}"
            )
        return oh, ow


def conv2d(x: FeatureMap, spec: ConvSpec, weight: torch.Tensor,
           bias: torch.Tensor | None = None) -> FeatureMap:
    """Cross-correlation with zero padding."""
    check_feature_map(x)
    if x.shape[1] != spec.in_channels:
        raise ContractViolation(
            f"input channels {x.shape[1]} != spec.in_channels {spec.in_channels}")
    expect = (spec.out_channels, spec.in_channels, *spec.kernel)
    if tuple(weight.shape) != expect:
        raise ContractViolation(f"weight shape {tuple(weight.shape)} != {expect}")
    spec.out_size(x.shape[2], x.shape[3])
    return F.conv2d(x, weight, bias, stride=spec.stride, padding=spec.padding)


def transposed_conv2d(x: FeatureMap, weight: torch.Tensor,
                      bias: torch.Tensor | None = None) -> FeatureMap:
    """Kernel-2 stride-2 transposed convolution: output is exactly 2x input.

    weight has shape (in_channels, out_channels, 2, 2).
    """
    check_feature_map(x)
    if tuple(weight.shape[2:]) != (2, 2):
        raise ContractViolation(f"transposed conv kernel must be 2x2, got {tuple(weight.shape[2:])}")
    if x.shape[1] != weight.shape[0]:
        raise ContractViolation(
            f"input channels {x.shape[1]} != weight in_channels {weight.shape[0]}")
    return F.conv_transpose2d(x, weight, bias, stride=2)


def pool2d(x: FeatureMap, kind: str, kernel: int, stride: int,
           padding: int = 0) -> FeatureMap:
    """Windowed max or average pooling; avg divides by the in-bounds count."""
    check_feature_map(x)
    if kind not in ("max", "avg"):
        raise ContractViolation(f"unknown pooling kind {kind!r}")
    if kernel > min(x.shape[2], x.shape[3]) + 2 * padding:
        raise ContractViolation(
            f"pool kernel {kernel} larger than padded input "
            f"{x.shape[2]}x{x.shape[3]} (+2*{padding})")
    if kind == "max":
        return F.max_pool2d(x, kernel, stride=stride, padding=padding)
    return F.avg_pool2d(x, kernel, stride=stride, padding=padding,
                        count_include_pad=False)


def resize_bilinear(x: FeatureMap, out_h: int, out_w: int) -> FeatureMap:
    """Bilinear resize with half-pixel centers (align_corners=False).

    Resizing to the current size returns the input unchanged (bit-identical).
    """
    check_feature_map(x)
    if out_h < 1 or out_w < 1:
        raise ContractViolation(f"target size {out_h}x{out_w} < 1")
    if (out_h, out_w) == (x.shape[2], x.shape[3]):
        return x
    return F.interpolate(x, size=(out_h, out_w), mode="bilinear",
                         align_corners=False)


def sigmoid(x: FeatureMap) -> FeatureMap:
    return torch.sigmoid(x)


def relu(x: FeatureMap) -> FeatureMap:
    return F.relu(x)


def relu6(x: FeatureMap) -> FeatureMap:
    return F.hardtanh(x, 0.0, 6.0)


class ParameterStore:
    """Named learnable arrays with gradients.

    Names are dot-separated hierarchical paths; iteration is always
    lexicographic so optimizer sweeps and serialization are deterministic.
    """

    def __init__(self) -> None:
        self._entries: dict[str, torch.Tensor] = {}

    def create(self, name: str, value: torch.Tensor) -> torch.Tensor:
        if name in self._entries:
            raise ContractViolation(f"duplicate parameter name {name!r}")
        t = value.detach().clone()
        t.requires_grad_(True)
        self._entries[name] = t
        return t

    def __getitem__(self, name: str) -> torch.Tensor:
        return self._entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def names(self) -> list[str]:
        return sorted(self._entries)

    def items(self) -> Iterator[tuple[str, torch.Tensor]]:
        for name in self.names():
            yield name, self._entries[name]

    def zero_grad(self) -> None:
        for t in self._entries.values():
            t.grad = None

    def num_values(self) -> int:
        return sum(t.numel() for t in self._entries.values())

    def to(self, dtype: torch.dtype) -> "ParameterStore":
        out = ParameterStore()
        for name, t in self.items():
            out.create(name, t.detach().to(dtype))
        return out

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: t.detach().cpu().numpy() for name, t in self.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        if set(arrays) != set(self._entries):
            missing = sorted(set(self._entries) - set(arrays))
            extra = sorted(set(arrays) - set(self._entries))
            raise ContractViolation(
                f"parameter name mismatch: missing={missing[:5]} extra={extra[:5]}")
        for name, arr in arrays.items():
            t = self._entries[name]
            if tuple(arr.shape) != tuple(t.shape):
                raise ContractViolation(
                    f"shape mismatch for {name!r}: {arr.shape} vs {tuple(t.shape)}")
            with torch.no_grad():
                t.copy_(torch.from_numpy(np.ascontiguousarray(arr)).to(t.dtype))


def save_param_archive(path, arrays: dict[str, np.ndarray], meta_json: str) -> None:
    """Write a zip holding one .npy per parameter plus meta.json."""
    with zipfile.ZipFile(path, "w", zipfile.ZIP_DEFLATED) as zf:
        zf.writestr("meta.json", meta_json)
        for name in sorted(arrays):
            import io

            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(arrays[name]))
            zf.writestr(name + ".npy", buf.getvalue())


def load_param_archive(path) -> tuple[dict[str, np.ndarray], str]:
    arrays: dict[str, np.ndarray] = {}
    with zipfile.ZipFile(path, "r") as zf:
        meta_json = zf.read("meta.json").decode("utf-8")
        for info in zf.infolist():
            if info.filename.endswith(".npy"):
                with zf.open(info) as fh:
                    arrays[info.filename[:-4]] = np.lib.format.read_array(fh)
    return arrays, meta_json


def kaiming_uniform(shape: tuple[int, ...], fan_in: int,
                    gen: torch.Generator) -> torch.Tensor:
    bound = math.sqrt(6.0 / fan_in)
    return (torch.rand(shape, generator=gen, dtype=torch.float32) * 2 - 1) * bound


def init_conv(store: ParameterStore, prefix: str, in_ch: int, out_ch: int,
              kernel: tuple[int, int], gen: torch.Generator,
              bias: bool = True, zero: bool = False, groups: int = 1) -> None:
    """Create `<prefix>.w` (and `.b`) for a conv layer.

    Kaiming-uniform fan-in weights, zero biases; `zero=True` zeroes the weight
    too (used for offset heads that must start in the plain-conv regime).
    """
    kh, kw = kernel
    shape = (out_ch, in_ch // groups, kh, kw)
    fan_in = (in_ch // groups) * kh * kw
    w = torch.zeros(shape) if zero else kaiming_uniform(shape, fan_in, gen)
    store.create(prefix + ".w", w)
    if bias:
        store.create(prefix + ".b", torch.zeros(out_ch))


def init_tconv(store: ParameterStore, prefix: str, in_ch: int, out_ch: int,
               gen: torch.Generator, bias: bool = True) -> None:
    """Create params for a kernel-2 stride-2 transposed conv; weight is (in, out, 2, 2)."""
    fan_in = in_ch * 4
    store.create(prefix + ".w", kaiming_uniform((in_ch, out_ch, 2, 2), fan_in, gen))
    if bias:
        store.create(prefix + ".b", torch.zeros(out_ch))
