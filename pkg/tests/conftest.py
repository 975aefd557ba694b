import numpy as np
import pytest
import torch


@pytest.fixture(autouse=True)
def _fixed_seed():
    torch.manual_seed(1234)
    np.random.seed(1234)


def finite_difference_grad(fn, tensor, eps=1e-6):
    """Central-difference gradient of the scalar fn() wrt tensor entries.

    fn must read `tensor` afresh on every call; tensor should be float64.
    """
    grad = torch.zeros_like(tensor)
    flat = tensor.reshape(-1)
    gflat = grad.reshape(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + eps
            up = float(fn())
            flat[i] = orig - eps
            down = float(fn())
            flat[i] = orig
            gflat[i] = (up - down) / (2.0 * eps)
    return grad


def max_relative_error(analytic, numeric):
    scale = max(analytic.abs().max().item(), numeric.abs().max().item(), 1e-12)
    return (analytic - numeric).abs().max().item() / scale
