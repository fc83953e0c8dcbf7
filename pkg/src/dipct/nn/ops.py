"""Differentiable primitives used by the generator and the reconstruction losses.

Everything here operates on torch tensors and is differentiated by torch's
reverse-mode engine, except the Radon transform, which is bridged to the
numpy projector with its matched adjoint as the backward rule.
"""

from __future__ import annotations

import contextlib

import numpy as np
import torch
import torch.nn.functional as F

from ..operator import ParallelGeometry, back_project, forward_project

LEAKY_SLOPE = 0.2
CHARBONNIER_EPS = 1e-8

# Valid-activation constants: ||act(x)||^2 <= c * ||x||^2 elementwise.  The
# sigmoid is bounded by 1 rather than by its argument, so it carries no c.
ACTIVATION_BOUND = {"leaky_relu": 1.0}


@contextlib.contextmanager
def flush_denormals():
    """Treat subnormal floats as zero while optimising.

    Long fits drive many activations and Adam moments into the subnormal
    range, where CPU arithmetic is several times slower.
    """
    torch.set_flush_denormal(True)
    try:
        yield
    finally:
        torch.set_flush_denormal(False)


class _RadonFunction(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, geom):
        ctx.geom = geom
        out = forward_project(x.detach().cpu().numpy(), geom)
        return torch.from_numpy(out).to(x.dtype)

    @staticmethod
    def backward(ctx, grad_out):
        grad = back_project(grad_out.detach().cpu().numpy(), ctx.geom)
        return torch.from_numpy(grad).to(grad_out.dtype), None


def radon(x: torch.Tensor, geom: ParallelGeometry) -> torch.Tensor:
    """Forward projection of ``(..., N, N)`` images; backward applies the adjoint."""
    return _RadonFunction.apply(x, geom)


def conv2d(x, weight, bias=None, stride: int = 1):
    pad = weight.shape[-1] // 2
    return F.conv2d(x, weight, bias, stride=stride, padding=pad)


def downsample(x, weight, bias=None):
    """Stride-2 convolution."""
    return conv2d(x, weight, bias, stride=2)


def upsample(x):
    return F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)


def channel_affine(x, scale, shift):
    return x * scale.view(1, -1, 1, 1) + shift.view(1, -1, 1, 1)


def batch_standardize(x, eps: float = 1e-5):
    """Zero mean, unit variance per channel over batch and pixels (batch-norm statistics)."""
    mean = x.mean(dim=(0, 2, 3), keepdim=True)
    var = x.var(dim=(0, 2, 3), unbiased=False, keepdim=True)
    return (x - mean) / torch.sqrt(var + eps)


def leaky_relu(x):
    return F.leaky_relu(x, LEAKY_SLOPE)


def sigmoid(x):
    return torch.sigmoid(x)


def concat(tensors):
    return torch.cat(tensors, dim=1)


def l2_discrepancy(y_pred, y_obs):
    return 0.5 * torch.sum((y_pred - y_obs) ** 2)


def poisson_discrepancy(y_pred, y_obs, photons_per_pixel: float, mu_max: float):
    """Poisson negative log-likelihood on post-log data, shifted so each bin's minimum is 0."""
    lam = photons_per_pixel * torch.exp(-mu_max * y_pred)
    k = photons_per_pixel * torch.exp(-mu_max * y_obs)
    return torch.sum(lam - k + k * mu_max * (y_pred - y_obs))


def smoothed_tv(x, eps: float = CHARBONNIER_EPS):
    """Charbonnier-smoothed isotropic TV with forward differences, summed over ``(..., H, W)``."""
    dh = F.pad(x[..., :, 1:] - x[..., :, :-1], (0, 1, 0, 0))
    dv = F.pad(x[..., 1:, :] - x[..., :-1, :], (0, 0, 0, 1))
    return torch.sum(torch.sqrt(dh**2 + dv**2 + eps))


def discrepancy_loss(disc, y_pred, y_obs):
    if disc.kind == "l2":
        return l2_discrepancy(y_pred, y_obs)
    return poisson_discrepancy(y_pred, y_obs, disc.photons_per_pixel, disc.mu_max)


def as_tensor(arr, dtype=torch.float64) -> torch.Tensor:
    return torch.as_tensor(np.asarray(arr), dtype=dtype)
