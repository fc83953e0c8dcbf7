"""Learned post-processing: a generator network applied to FBP reconstructions.

The network ``D`` is trained on pairs ``(FBP(y_i), x_i)`` by minimising the
empirical mean squared error, and a reconstruction is ``D(FBP(y))``.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .datasim import Dataset
from .fbp import FbpFilter, fbp_reconstruct
from .nn import AdamState, NetworkConfig, ParamStore, adam_step, backward, forward, init_params
from .nn import load_checkpoint, ops, save_checkpoint
from .operator import ParallelGeometry

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    net: NetworkConfig = field(
        default_factory=lambda: NetworkConfig(scales=4, channels_per_layer=32, skip_channels=(4,) * 4, dtype="float32")
    )
    epochs: int = 40
    batch_size: int = 4
    lr: float = 1e-3
    seed: int = 0
    checkpoint: str | None = None
    fbp_filter: FbpFilter = field(default_factory=lambda: FbpFilter("hann", 0.6))
    match_mean: bool = True

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.net.input_channels != 1:
            raise ValueError("the post-processing network takes a single-channel image")


@dataclass
class EpochLog:
    epoch: int
    train_mse: float
    val_mse: float | None


@dataclass
class TrainingLog:
    epochs: list[EpochLog]
    best_epoch: int
    best_val_mse: float | None
    wall_time: float


def _fbp_stack(pairs, geom: ParallelGeometry, filt: FbpFilter, dtype) -> tuple[torch.Tensor, torch.Tensor]:
    inputs = np.stack([fbp_reconstruct(p.observation, geom, filt) for p in pairs])[:, None]
    targets = np.stack([p.ground_truth for p in pairs])[:, None]
    return torch.tensor(inputs, dtype=dtype), torch.tensor(targets, dtype=dtype)


def _mse(params: ParamStore, inputs: torch.Tensor, targets: torch.Tensor, batch: int) -> float:
    total = 0.0
    with torch.no_grad():
        for i in range(0, len(inputs), batch):
            out = forward(params, inputs[i : i + batch])
            total += float(torch.sum((out - targets[i : i + batch]) ** 2))
    return total / targets.numel()


def train_postprocessor(ds: Dataset, cfg: TrainConfig) -> tuple[ParamStore, TrainingLog]:
    """Train with Adam on shuffled mini-batches; returns the best-on-validation weights.

    Without a validation split the final epoch is kept.
    """
    if not ds.train:
        raise ValueError("training set is empty")
    net = cfg.net
    if net.output_size != ds.geometry.image_size:
        raise ValueError(f"network output size {net.output_size} does not match images of size {ds.geometry.image_size}")
    dtype = net.torch_dtype
    t0 = time.perf_counter()
    x_train, t_train = _fbp_stack(ds.train, ds.geometry, cfg.fbp_filter, dtype)
    has_val = bool(ds.validation)
    if has_val:
        x_val, t_val = _fbp_stack(ds.validation, ds.geometry, cfg.fbp_filter, dtype)

    params = init_params(net, cfg.seed, output_mean=float(t_train.mean()) if cfg.match_mean else None)
    state = AdamState(lr=cfg.lr)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 3]))
    best = params.copy()
    best_val, best_epoch = float("inf"), 0
    epochs = []
    n = len(x_train)
    with ops.flush_denormals():
        for epoch in range(1, cfg.epochs + 1):
            order = rng.permutation(n)
            running = 0.0
            for i in range(0, n, cfg.batch_size):
                idx = torch.as_tensor(order[i : i + cfg.batch_size])
                out = forward(params, x_train[idx])
                loss = torch.mean((out - t_train[idx]) ** 2)
                backward(loss, params)
                adam_step(params, state)
                running += float(loss.detach()) * len(idx)
            val = _mse(params, x_val, t_val, cfg.batch_size) if has_val else None
            epochs.append(EpochLog(epoch, running / n, val))
            log.info("epoch %d train %.3e val %s", epoch, running / n, val)
            if not has_val or val < best_val:
                best, best_val, best_epoch = params.copy(), val, epoch

    result = TrainingLog(epochs, best_epoch, best_val if has_val else None, time.perf_counter() - t0)
    if cfg.checkpoint:
        save_checkpoint(
            cfg.checkpoint,
            best,
            extra={
                "method": "fbp-unet",
                "best_epoch": best_epoch,
                "fbp_filter": {"kind": cfg.fbp_filter.kind, "frequency_scaling": cfg.fbp_filter.frequency_scaling},
            },
        )
    return best, result


def apply_postprocessor(
    params: ParamStore, y: np.ndarray, geom: ParallelGeometry, filt: FbpFilter | None = None
) -> np.ndarray:
    """``D(FBP(y))`` as a float64 image with values in (0, 1)."""
    if params.config.output_size != geom.image_size:
        raise ValueError(
            f"network trained for {params.config.output_size}x{params.config.output_size} images, "
            f"geometry has {geom.image_size}"
        )
    fbp = fbp_reconstruct(y, geom, filt or FbpFilter("hann", 0.6))
    inp = torch.tensor(fbp[None, None], dtype=params.config.torch_dtype)
    with torch.no_grad():
        return forward(params, inp)[0, 0].cpu().numpy().astype(np.float64)


def load_postprocessor(path) -> tuple[ParamStore, FbpFilter]:
    params, extra = load_checkpoint(Path(path))
    f = extra.get("fbp_filter", {"kind": "hann", "frequency_scaling": 0.6})
    return params, FbpFilter(f["kind"], f["frequency_scaling"])
