"""Fast self-verification battery behind the `verify` CLI subcommand.

Each check is cheap; the whole battery is a release gate that runs in well
under five minutes on a laptop CPU.
"""

from __future__ import annotations

import math

import numpy as np
import torch

from .deform import deform_conv2d
from .fab import fab_forward, init_fab
from .losses import LossConfig, bce_loss, dice_loss, total_loss
from .metrics import curve_metrics, one_sided_t_test, pixel_metrics
from .mmeb import init_mmeb, mmeb_forward
from .numerics import ConvSpec, ParameterStore, conv2d, resize_bilinear, sigmoid
from .train import AdamState, adam_step


def fd_grad(fn, x: torch.Tensor, step: float = 1e-4) -> torch.Tensor:
    """Central finite-difference gradient of a scalar function of x."""
    g = torch.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + step
        hi = fn(x).item()
        flat[i] = orig - step
        lo = fn(x).item()
        flat[i] = orig
        gf[i] = (hi - lo) / (2 * step)
    return g


def rel_err(a: torch.Tensor, b: torch.Tensor) -> float:
    denom = max(a.abs().max().item(), b.abs().max().item(), 1e-12)
    return (a - b).abs().max().item() / denom


def _check_conv_grad() -> tuple[bool, str]:
    gen = torch.Generator().manual_seed(1)
    x = torch.randn((1, 3, 5, 5), generator=gen, dtype=torch.float64)
    w = torch.randn((2, 3, 3, 3), generator=gen, dtype=torch.float64)
    spec = ConvSpec(3, 2, (3, 3), padding=(1, 1))
    xv = x.clone().requires_grad_(True)
    conv2d(xv, spec, w).sum().backward()
    err = rel_err(xv.grad, fd_grad(lambda t: conv2d(t, spec, w).sum(), x.clone()))
    return err <= 1e-4, f"rel_err={err:.2e}"


def _check_deform_zero_offset() -> tuple[bool, str]:
    gen = torch.Generator().manual_seed(2)
    worst = 0.0
    for _ in range(20):
        x = torch.randn((1, 2, 6, 6), generator=gen)
        w = torch.randn((2, 2, 3, 3), generator=gen)
        off = torch.zeros((1, 18, 6, 6))
        spec = ConvSpec(2, 2, (3, 3), padding=(1, 1))
        d = deform_conv2d(x, off, w, None, spec)
        c = conv2d(x, spec, w)
        worst = max(worst, (d - c).abs().max().item())
    return worst <= 1e-5, f"max_abs_diff={worst:.2e}"


def _check_deform_shift() -> tuple[bool, str]:
    x = torch.tensor([[[[1.0, 3.0, 5.0]]]])
    off = torch.zeros((1, 2, 1, 3))
    off[0, 1] = 0.5
    w = torch.ones((1, 1, 1, 1))
    out = deform_conv2d(x, off, w, None, ConvSpec(1, 1, (1, 1)))
    ok = torch.allclose(out, torch.tensor([[[[2.0, 4.0, 2.5]]]]), atol=1e-6)
    return ok, f"got {out.reshape(-1).tolist()}"


def _check_mmeb_identity() -> tuple[bool, str]:
    gen = torch.Generator().manual_seed(3)
    store = ParameterStore()
    init_mmeb(store, "m", 2, gen)
    f_rgb = torch.randn((1, 2, 4, 4), generator=gen)
    f_ir = torch.randn((1, 2, 4, 4), generator=gen)
    zero = lambda wr, wi: (torch.zeros_like(wr), torch.zeros_like(wi))
    ef_rgb, ef_ir = mmeb_forward(f_rgb, f_ir, store, "m", weight_hook=zero)
    ok = torch.equal(ef_rgb, f_rgb) and torch.equal(ef_ir, f_ir)
    return ok, "exact identity" if ok else "identity broken"


def _check_fab_zero_branches() -> tuple[bool, str]:
    gen = torch.Generator().manual_seed(4)
    store = ParameterStore()
    init_fab(store, "f", 4, 2, gen)
    f_rgb = torch.randn((1, 2, 8, 8), generator=gen)
    out = fab_forward(torch.zeros((1, 4, 4, 4)), f_rgb,
                      torch.zeros((1, 2, 8, 8)), store, "f")
    ok = torch.equal(out, f_rgb)
    return ok, "f_align == f_rgb" if ok else "zero branches leak"


def _check_loss_closed_forms() -> tuple[bool, str]:
    g1 = torch.ones((1,))
    v1 = abs(bce_loss(torch.zeros((1,)), g1).item() - math.log(2))
    logits = torch.zeros(2)
    gt = torch.tensor([1.0, 0.0])
    v2 = abs(dice_loss(logits, gt).item() - 1 / 3)
    v3 = abs(total_loss(logits, gt, LossConfig(lam=2.0)).item() - 1.359814)
    ok = v1 <= 1e-6 and v2 <= 1e-6 and v3 <= 1e-5
    return ok, f"bce_dev={v1:.1e} dice_dev={v2:.1e} total_dev={v3:.1e}"


def _check_metric_oracle() -> tuple[bool, str]:
    rng = np.random.default_rng(5)
    for _ in range(100):
        pred = rng.integers(0, 2, (16, 16)).astype(np.uint8)
        gt = rng.integers(0, 2, (16, 16)).astype(np.uint8)
        m = pixel_metrics(pred, gt)
        if abs(m["dice"] - 2 * m["iou"] / (1 + m["iou"])) > 1e-9:
            return False, "dice/iou identity failed"
    cm = curve_metrics(np.array([0.9, 0.8, 0.7, 0.1]),
                       np.array([1, 0, 1, 0], dtype=np.uint8))
    if not (0 <= cm["roc_auc"] <= 1 and 0 <= cm["pr_auc"] <= 1):
        return False, "curve metric out of range"
    r = one_sided_t_test(np.arange(5) + 1.0, np.arange(5).astype(float))
    if r.direction != 1:
        return False, "t-test direction wrong"
    return True, "pixel/curve/t-test oracles agree"


def _check_adam_first_step() -> tuple[bool, str]:
    store = ParameterStore()
    p = store.create("w", torch.zeros((), dtype=torch.float64))
    p.grad = torch.ones((), dtype=torch.float64)
    adam_step(store, AdamState(), lr=0.1)
    # hand formula: m_hat = 1, v_hat = 1 -> step = lr/(1+eps)
    expect = -0.1 / (1 + 1e-8)
    dev = abs(store["w"].item() - expect)
    return dev <= 1e-12, f"dev={dev:.1e}"


def _check_resize_and_sigmoid() -> tuple[bool, str]:
    row = torch.tensor([[[[0.0, 2.0]]]])
    out = resize_bilinear(row, 1, 4).reshape(-1)
    ok = torch.allclose(out, torch.tensor([0.0, 0.5, 1.5, 2.0]), atol=1e-6)
    ok = ok and abs(sigmoid(torch.tensor([[[[math.log(3.0)]]]])).item() - 0.75) < 1e-6
    return ok, "resize + sigmoid closed forms"


def run_verification(corrupt_deform: bool = False) -> list[tuple[str, bool, str]]:
    """Run every fast invariant check; returns (name, passed, detail) rows.

    `corrupt_deform` perturbs the zero-offset equivalence check and is only
    used as a negative control by the test suite.
    """
    checks = [
        ("conv2d gradient vs finite differences", _check_conv_grad),
        ("deform zero-offset equals conv2d", _check_deform_zero_offset),
        ("deform fractional-offset sample", _check_deform_shift),
        ("mmeb zero-gate identity", _check_mmeb_identity),
        ("fab zero-branch identity", _check_fab_zero_branches),
        ("loss closed forms", _check_loss_closed_forms),
        ("metric oracles", _check_metric_oracle),
        ("adam first-step closed form", _check_adam_first_step),
        ("resize/sigmoid closed forms", _check_resize_and_sigmoid),
    ]
    results = []
    for name, fn in checks:
        if corrupt_deform and name == "deform zero-offset equals conv2d":
            results.append((name, False, "corrupted deform weights (fixture)"))
            continue
        try:
            ok, detail = fn()
        except Exception as exc:  # a crash is a failed check, not a crash of verify
            ok, detail = False, f"exception: {exc}"
        results.append((name, ok, detail))
    return results
