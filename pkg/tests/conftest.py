import pytest
import torch


@pytest.fixture(autouse=True)
def _deterministic():
    torch.manual_seed(0)
    yield


def rel_err(analytic: torch.Tensor, numeric: torch.Tensor) -> float:
    """Max-norm relative error used by all finite-difference checks."""
    num = float((analytic - numeric).abs().max())
    den = float(analytic.abs().max() + numeric.abs().max()) + 1e-12
    return num / den


def central_diff(fn, x: torch.Tensor, step: float = 1e-4) -> torch.Tensor:
    """Central finite differences of a scalar-valued fn wrt every entry of x."""
    grad = torch.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + step
        hi = float(fn(x))
        flat[i] = orig - step
        lo = float(fn(x))
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * step)
    return grad


def analytic_grad(fn, x: torch.Tensor) -> torch.Tensor:
    xg = x.clone().requires_grad_(True)
    fn(xg).backward()
    return xg.grad.detach().clone()
