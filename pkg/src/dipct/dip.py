"""Deep-image-prior reconstructors.

* :func:`dip_reconstruct` - plain DIP, fit ``A phi(theta, z)`` to the data.
* :func:`diptv_reconstruct` - same with an added TV penalty on the output.
* :func:`fit_parameterization` - fit ``phi(theta, z)`` to a given image (identity operator).
* :func:`dip_with_initial` - fit an initial reconstruction, then continue with the
  data term plus TV, stopping after ``iterations`` steps or once the
  residual norm drops to ``stop_delta``.

All losses use the same data term as the variational solvers (``S = 0.5 * ||.||^2``
for l2) so TV weights are interchangeable between :mod:`dipct.variational` and here.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np
import torch

from . import metrics
from .nn import AdamState, NetworkConfig, ParamStore, adam_step, backward, build_network, forward
from .nn import ops
from .operator import ParallelGeometry
from .result import ReconstructionResult, TraceEntry
from .variational import Discrepancy

log = logging.getLogger(__name__)

DEFAULT_CLIP_BOUND = 100.0
DEFAULT_BACKTRACK = 10.0
MAX_BACKTRACKS = 20
# consecutive steps the loss must stay above the backtrack threshold before rolling back
BACKTRACK_PATIENCE = 50


@dataclass(frozen=True)
class DipConfig:
    net: NetworkConfig = field(default_factory=NetworkConfig)
    lr: float = 1e-3
    iterations: int = 2000
    alpha: float = 0.0
    discrepancy: Discrepancy = field(default_factory=Discrepancy)
    seed: int = 0
    trace_every: int = 50
    stop_delta: float | None = None
    clip_bound: float | None = DEFAULT_CLIP_BOUND
    init_iterations: int = 1000
    init_lr: float | None = None
    keep_snapshots: bool = False
    match_mean: bool = True
    backtrack: float | None = DEFAULT_BACKTRACK

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if self.trace_every < 1:
            raise ValueError("trace_every must be >= 1")
        if self.backtrack is not None and self.backtrack <= 1:
            raise ValueError("backtrack must be > 1 or None")


@dataclass
class FitResult:
    params: ParamStore
    z: torch.Tensor
    mse: float
    trace: list[TraceEntry]
    wall_time: float
    iterations_run: int


def _output_image(params, z) -> np.ndarray:
    with torch.no_grad():
        return forward(params, z)[0, 0].cpu().numpy().astype(np.float64)


def _quality(entry: TraceEntry, image: np.ndarray, gt):
    if gt is not None:
        entry.psnr = metrics.psnr(image, gt)
        entry.ssim = metrics.ssim(image, gt)
    return entry


def _optimize(
    params: ParamStore,
    z: torch.Tensor,
    loss_fn,
    iterations: int,
    lr: float,
    trace_every: int,
    gt=None,
    residual_fn=None,
    stop_delta: float | None = None,
    keep_snapshots: bool = False,
    label: str = "dip",
    on_step=None,
    backtrack: float | None = None,
):
    """Adam loop shared by every DIP variant.

    ``loss_fn(out) -> (loss, residual_norm or None)``.  Trace entry ``k`` holds
    values computed from ``theta_k``, i.e. after ``k`` updates.  ``on_step(k, params)``
    is called after update ``k``.  With ``backtrack`` set, a loss that stays above
    ``backtrack`` times the lowest loss so far for ``BACKTRACK_PATIENCE`` steps sends
    parameters and Adam moments back to the best iterate and halves the learning
    rate for the rest of the run.  Abandoned updates count towards ``iterations``.
    """
    state = AdamState(lr=lr)
    trace: list[TraceEntry] = []
    snapshots = {}
    start = time.perf_counter()
    with ops.flush_denormals():
        it, last_image, flags = _loop(
            params, z, loss_fn, iterations, state, trace, snapshots, trace_every, gt, stop_delta, keep_snapshots, label,
            on_step, backtrack,
        )
    info = dict(flags, wall_time=time.perf_counter() - start, final_lr=state.lr)
    if keep_snapshots:
        info["snapshots"] = snapshots
    return last_image, trace, it, info


class _Checkpoint:
    """Copy of the parameters and, optionally, the Adam moments."""

    def __init__(self, params: ParamStore):
        self.params = [p.detach().clone() for p in params]
        self.m: dict = {}
        self.v: dict = {}
        self.step = 0

    @torch.no_grad()
    def save(self, params: ParamStore, state: AdamState | None = None):
        for b, p in zip(self.params, params):
            b.copy_(p)
        if state is None:
            return
        for mine, theirs in ((self.m, state.m), (self.v, state.v)):
            for name, t in theirs.items():
                if name in mine:
                    mine[name].copy_(t)
                else:
                    mine[name] = t.clone()
        self.step = state.step

    @torch.no_grad()
    def restore(self, params: ParamStore, state: AdamState | None = None):
        for b, p in zip(self.params, params):
            p.copy_(b)
        if state is not None:
            state.m = {k: t.clone() for k, t in self.m.items()}
            state.v = {k: t.clone() for k, t in self.v.items()}
            state.step = self.step


def _loop(
    params, z, loss_fn, iterations, state, trace, snapshots, trace_every, gt, stop_delta, keep_snapshots, label, on_step,
    backtrack,
):
    last_image = None
    aborted = stopped_early = False
    previous = _Checkpoint(params)
    best_state = _Checkpoint(params) if backtrack is not None else None
    best = math.inf
    backtracks = excursion = 0
    it = 0
    while True:
        out = forward(params, z)
        loss, residual = loss_fn(out)
        loss_value = float(loss.detach())
        if not math.isfinite(loss_value):
            if it == 0:
                raise FloatingPointError(f"{label}: non-finite loss at the initial parameters")
            log.warning("%s: non-finite loss at iteration %d, keeping last finite iterate", label, it)
            previous.restore(params)
            aborted = True
            it -= 1
            break
        if best_state is not None and loss_value > backtrack * best:
            excursion += 1
            if excursion >= BACKTRACK_PATIENCE and backtracks < MAX_BACKTRACKS:
                # the fit has left the basin for good: resume from the best iterate at half the step size
                best_state.restore(params, state)
                state.lr *= 0.5
                backtracks += 1
                excursion = 0
                log.info("%s: loss stuck at %.4g by iteration %d, back to best with lr %.3g", label, loss_value, it, state.lr)
                continue
        else:
            excursion = 0
        if loss_value < best:
            best = loss_value
            if best_state is not None:
                best_state.save(params, state)
        last_image = out.detach()[0, 0].cpu().numpy().astype(np.float64)
        done = it >= iterations
        if stop_delta is not None and residual is not None and residual <= stop_delta:
            done = stopped_early = True
        if it % trace_every == 0 or done:
            trace.append(_quality(TraceEntry(it, loss_value, discrepancy=residual), last_image, gt))
            if keep_snapshots:
                snapshots[it] = last_image
        if done:
            break
        backward(loss, params)
        previous.save(params)
        adam_step(params, state)
        it += 1
        if on_step is not None:
            on_step(it, params)
    return it, last_image, {"aborted": aborted, "stopped_early": stopped_early, "backtracks": backtracks}


def _data_loss(y: np.ndarray, geom: ParallelGeometry, disc: Discrepancy, alpha: float, dtype):
    y_t = torch.as_tensor(np.asarray(y, dtype=np.float64), dtype=dtype)

    def loss_fn(out):
        image = out[0, 0]
        ax = ops.radon(image, geom)
        loss = ops.discrepancy_loss(disc, ax, y_t)
        if alpha > 0:
            loss = loss + alpha * ops.smoothed_tv(image)
        residual = float(torch.linalg.vector_norm((ax - y_t).detach()))
        return loss, residual

    return loss_fn


def _check_sino(y, geom):
    y = np.asarray(y)
    if y.shape != geom.sino_shape:
        raise ValueError(f"sinogram has shape {y.shape}, geometry expects {geom.sino_shape}")
    if geom.image_size != 0 and y.size == 0:
        raise ValueError("empty sinogram")
    return y


def sinogram_mean_intensity(y, geom: ParallelGeometry) -> float:
    """Mean image intensity implied by the data.

    Every parallel projection integrates to the total image mass, so averaging
    the per-angle detector sums gives it without reconstructing.
    """
    mass = float(np.mean(np.sum(y, axis=1))) * geom.detector_spacing
    return mass / (geom.image_size * geom.pixel_spacing) ** 2


def _net_for(cfg: DipConfig, geom: ParallelGeometry) -> NetworkConfig:
    if cfg.net.output_size != geom.image_size:
        return replace(cfg.net, output_size=geom.image_size)
    return cfg.net


def _run_data_fit(y, geom, cfg: DipConfig, gt, method: str, params=None, z=None, on_step=None):
    y = _check_sino(y, geom)
    net = _net_for(cfg, geom)
    if params is None:
        mean = sinogram_mean_intensity(y, geom) if cfg.match_mean else None
        params, z = build_network(net, cfg.seed, cfg.clip_bound, mean)
    loss_fn = _data_loss(y, geom, cfg.discrepancy, cfg.alpha, net.torch_dtype)
    image, trace, its, info = _optimize(
        params,
        z,
        loss_fn,
        cfg.iterations,
        cfg.lr,
        cfg.trace_every,
        gt=gt,
        stop_delta=cfg.stop_delta,
        keep_snapshots=cfg.keep_snapshots,
        label=method,
        on_step=on_step,
        backtrack=cfg.backtrack,
    )
    info["params"] = params
    return ReconstructionResult(
        image=image,
        method=method,
        trace=trace,
        wall_time=info["wall_time"],
        iterations_run=its,
        info=info,
    )


def dip_reconstruct(y, geom: ParallelGeometry, cfg: DipConfig, gt=None, on_step=None) -> ReconstructionResult:
    """Vanilla deep image prior; pass ``gt`` to trace PSNR/SSIM for early-stopping studies."""
    if cfg.alpha != 0:
        raise ValueError("dip_reconstruct is the unregularised variant; use diptv_reconstruct")
    return _run_data_fit(y, geom, cfg, gt, "dip", on_step=on_step)


def diptv_reconstruct(y, geom: ParallelGeometry, cfg: DipConfig, gt=None, on_step=None) -> ReconstructionResult:
    if cfg.alpha <= 0:
        raise ValueError("diptv_reconstruct needs alpha > 0")
    return _run_data_fit(y, geom, cfg, gt, "diptv", on_step=on_step)


def fit_parameterization(
    x0: np.ndarray,
    net_cfg: NetworkConfig,
    lr: float = 1e-3,
    iterations: int = 1000,
    seed: int = 0,
    clip_bound: float | None = DEFAULT_CLIP_BOUND,
    trace_every: int = 50,
    match_mean: bool = True,
    backtrack: float | None = DEFAULT_BACKTRACK,
) -> FitResult:
    """Parameters whose generator output best matches ``x0`` in least squares."""
    x0 = np.asarray(x0, dtype=np.float64)
    if x0.shape != (net_cfg.output_size, net_cfg.output_size):
        net_cfg = replace(net_cfg, output_size=x0.shape[-1])
    params, z = build_network(net_cfg, seed, clip_bound, float(x0.mean()) if match_mean else None)
    target = torch.as_tensor(x0, dtype=net_cfg.torch_dtype)

    def loss_fn(out):
        return torch.sum((out[0, 0] - target) ** 2), None

    image, trace, its, info = _optimize(params, z, loss_fn, iterations, lr, trace_every, label="fit", backtrack=backtrack)
    mse = float(np.mean((image - x0) ** 2))
    return FitResult(params, z, mse, trace, info["wall_time"], its)


def dip_with_initial(
    y, geom: ParallelGeometry, x0: np.ndarray, cfg: DipConfig, gt=None
) -> ReconstructionResult:
    """Deep image prior started from the deep-neural parameterization of ``x0``.

    Phase 1 fits the generator to ``x0`` (clipped to [0, 1]) for
    ``cfg.init_iterations`` steps using only the identity operator.  Phase 2
    runs at most ``cfg.iterations`` steps on the data term plus
    ``cfg.alpha`` times TV, stopping as soon as ``||A phi - y|| <= cfg.stop_delta``.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    if x0.shape != geom.image_shape:
        raise ValueError(f"initial image has shape {x0.shape}, geometry expects {geom.image_shape}")
    y = _check_sino(y, geom)
    net = _net_for(cfg, geom)
    fit = fit_parameterization(
        np.clip(x0, 0.0, 1.0),
        net,
        lr=cfg.init_lr or cfg.lr,
        iterations=cfg.init_iterations,
        seed=cfg.seed,
        clip_bound=cfg.clip_bound,
        trace_every=cfg.trace_every,
        match_mean=cfg.match_mean,
        backtrack=cfg.backtrack,
    )
    method = "dip-init"
    result = _run_data_fit(y, geom, cfg, gt, method, params=fit.params, z=fit.z)
    result.info.update(
        {
            "init_trace": fit.trace,
            "init_mse": fit.mse,
            "init_wall_time": fit.wall_time,
            "init_iterations": fit.iterations_run,
            "radon_iterations": result.iterations_run,
            "radon_wall_time": result.wall_time,
        }
    )
    result.wall_time += fit.wall_time
    return result


def radial_energy_fractions(image: np.ndarray, bands: int = 4) -> np.ndarray:
    """Share of spectral energy in each of ``bands`` equal-width radial frequency bands."""
    spec = np.abs(np.fft.fftshift(np.fft.fft2(image))) ** 2
    n = image.shape[0]
    k = np.fft.fftshift(np.fft.fftfreq(n))
    radius = np.sqrt(k[None, :] ** 2 + k[:, None] ** 2)
    edges = np.linspace(0, radius.max() + 1e-12, bands + 1)
    energy = np.array(
        [spec[(radius >= lo) & (radius < hi)].sum() for lo, hi in zip(edges[:-1], edges[1:])]
    )
    return energy / energy.sum()
