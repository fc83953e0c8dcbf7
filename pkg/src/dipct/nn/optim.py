"""Backward pass bookkeeping, Adam and weight clipping."""

from __future__ import annotations

from dataclasses import dataclass, field

import torch

from .network import ParamStore


class TapeError(RuntimeError):
    pass


def backward(loss: torch.Tensor, params: ParamStore) -> dict:
    """Populate ``param.grad`` with d(loss)/d(param); each forward graph is usable once."""
    if getattr(loss, "_dipct_consumed", False):
        raise TapeError("backward called twice on the same forward pass; run forward again")
    if loss.dim() != 0:
        raise ValueError("backward expects a scalar loss")
    params.zero_grad()
    loss.backward()
    loss._dipct_consumed = True
    for p in params:
        if p.grad is None:
            p.grad = torch.zeros_like(p)
    return params.grads()


@dataclass
class AdamState:
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


@torch.no_grad()
def adam_step(params: ParamStore, state: AdamState, grads: dict | None = None) -> None:
    """One bias-corrected Adam update in place, then clipping if the store has a bound."""
    grads = grads if grads is not None else params.grads()
    b1, b2 = state.betas
    state.step += 1
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, p in params.items():
        g = grads[name]
        if g is None:
            continue
        if name not in state.m:
            state.m[name] = torch.zeros_like(p)
            state.v[name] = torch.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m.mul_(b1).add_(g, alpha=1.0 - b1)
        v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
        p.sub_(state.lr * (m / c1) / (torch.sqrt(v / c2) + state.eps))
    if params.clip_bound is not None:
        clip_params(params, params.clip_bound)


@torch.no_grad()
def clip_params(params: ParamStore, bound: float) -> ParamStore:
    if bound <= 0:
        raise ValueError("clip bound must be positive")
    for p in params:
        p.clamp_(-bound, bound)
    return params
