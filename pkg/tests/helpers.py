import numpy as np
import torch


def fd_check(fn, inputs, h: float = 1e-6, seed: int = 0) -> float:
    """Worst relative error between autograd and central differences.

    The output is reduced to a scalar against a fixed random weighting so that
    every output entry contributes.
    """
    inputs = [x.detach().clone().requires_grad_(True) for x in inputs]
    out = fn(*inputs)
    weight = torch.randn(out.shape, dtype=torch.float64, generator=torch.Generator().manual_seed(seed))
    (out * weight).sum().backward()
    worst = 0.0
    for x in inputs:
        analytic = x.grad.detach().numpy().ravel()
        numeric = np.empty_like(analytic)
        flat = x.detach().view(-1)
        with torch.no_grad():
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + h
                up = float((fn(*inputs) * weight).sum())
                flat[i] = orig - h
                down = float((fn(*inputs) * weight).sum())
                flat[i] = orig
                numeric[i] = (up - down) / (2 * h)
        scale = max(np.abs(numeric).max(), np.abs(analytic).max(), 1e-8)
        worst = max(worst, float(np.abs(numeric - analytic).max() / scale))
    return worst
