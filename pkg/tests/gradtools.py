"""Finite-difference gradient checking used by unit and acceptance tests."""

import torch


def fd_grad(f, x: torch.Tensor, h: float = 1e-4) -> torch.Tensor:
    """Central-difference gradient of scalar f at x, element by element."""
    g = torch.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + h
        hi = float(f(x))
        flat[i] = orig - h
        lo = float(f(x))
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * h)
    return g


def rel_error(a: torch.Tensor, b: torch.Tensor) -> float:
    denom = max(float(a.norm()), float(b.norm()), 1e-12)
    return float((a - b).norm()) / denom


def check_grad(f, x: torch.Tensor, tol: float = 1e-4, h: float = 1e-4) -> float:
    """Compare autograd and finite differences; returns the relative error.

    A loss whose graph never touches x (e.g. x enters only through argmax)
    has analytic gradient zero; finite differences must agree.
    """
    x = x.detach().double().requires_grad_(True)
    loss = f(x)
    if torch.is_tensor(loss) and loss.requires_grad:
        (grad,) = torch.autograd.grad(loss, x, allow_unused=True)
        grad = torch.zeros_like(x) if grad is None else grad
    else:
        grad = torch.zeros_like(x)
    with torch.no_grad():
        fd = fd_grad(lambda t: f(t.detach()), x.detach().clone(), h=h)
    if float(grad.norm()) == 0.0 and float(fd.norm()) == 0.0:
        return 0.0
    err = rel_error(grad, fd)
    assert err <= tol, f"gradient mismatch: rel error {err:.3e} > {tol}"
    return err
