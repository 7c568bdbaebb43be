import numpy as np
import pytest
import torch


@pytest.fixture(autouse=True)
def _seed_everything():
    torch.manual_seed(0)
    np.random.seed(0)


def central_fd(fn, x: torch.Tensor, step: float = 1e-4) -> torch.Tensor:
    """Independent central finite-difference gradient of scalar fn(x)."""
    x = x.detach().clone()
    grad = torch.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + step
        hi = float(fn(x).detach())
        flat[i] = orig - step
        lo = float(fn(x).detach())
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * step)
    return grad


def max_rel_err(analytic: torch.Tensor, numeric: torch.Tensor) -> float:
    scale = max(analytic.abs().max().item(), numeric.abs().max().item(), 1e-10)
    return (analytic - numeric).abs().max().item() / scale


def grad_matches(make_scalar, x: torch.Tensor, tol: float,
                 step: float = 1e-4) -> float:
    """Compare autograd gradient of make_scalar(x) against central FD."""
    xv = x.detach().clone().requires_grad_(True)
    make_scalar(xv).backward()
    err = max_rel_err(xv.grad, central_fd(make_scalar, x, step))
    assert err <= tol, f"gradient rel err {err} > {tol}"
    return err


def store_grad_check(store, forward_scalar, tol, step=1e-4, names=None):
    """Check autograd grads of every named parameter against central FD.

    `forward_scalar` takes no arguments and reads parameters from `store`.
    """
    store.zero_grad()
    forward_scalar().backward()
    for name in (names or store.names()):
        p = store[name]
        analytic = p.grad if p.grad is not None else torch.zeros_like(p)
        flat = p.data.reshape(-1)
        numeric = torch.zeros_like(flat)
        for i in range(flat.numel()):
            orig = flat[i].item()
            with torch.no_grad():
                flat[i] = orig + step
            hi = float(forward_scalar().detach())
            with torch.no_grad():
                flat[i] = orig - step
            lo = float(forward_scalar().detach())
            with torch.no_grad():
                flat[i] = orig
            numeric[i] = (hi - lo) / (2 * step)
        err = max_rel_err(analytic.reshape(-1), numeric)
        assert err <= tol, f"param {name}: gradient rel err {err} > {tol}"
