"""Encoder-decoder generator with optional skip channels.

Wiring (per scale ``i`` of ``scales``, all widths ``channels``):

    encoder  x -> [3x3 conv, stride 2] -> affine -> lrelu -> [3x3 conv] -> affine -> lrelu
    skip     x -> [1x1 conv to skip_channels[i]] -> affine -> lrelu        (if nonzero)
    decoder  d -> bilinear x2 -> concat(skip_i) -> [3x3 conv] -> affine -> lrelu
                                               -> [1x1 conv] -> affine -> lrelu
    output   [1x1 conv to 1 channel] -> sigmoid

"affine" is a learned per-channel scale and shift standing in for batch
normalisation, which is meaningless for a single fixed input.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from . import ops

DTYPES = {"float32": torch.float32, "float64": torch.float64}


@dataclass(frozen=True)
class NetworkConfig:
    scales: int = 5
    channels_per_layer: int = 32
    skip_channels: tuple[int, ...] = (0, 0, 0, 0, 0)
    activation: str = "leaky_relu"
    final_activation: str = "sigmoid"
    input_channels: int = 1
    output_size: int = 128
    dtype: str = "float64"
    normalization: str = "none"

    def __post_init__(self):
        object.__setattr__(self, "skip_channels", tuple(int(s) for s in self.skip_channels))
        if self.scales < 1:
            raise ValueError("scales must be >= 1")
        if len(self.skip_channels) != self.scales:
            raise ValueError("need one skip_channels entry per scale")
        if any(s not in (0, 4) for s in self.skip_channels):
            raise ValueError("skip_channels entries must be 0 or 4")
        if self.activation != "leaky_relu" or self.final_activation != "sigmoid":
            raise ValueError("only leaky_relu hidden and sigmoid output activations are supported")
        if self.output_size % (2**self.scales):
            raise ValueError(
                f"output_size {self.output_size} is not divisible by 2**scales = {2**self.scales}"
            )
        if self.normalization not in ("none", "batch"):
            raise ValueError("normalization must be 'none' or 'batch'")
        if self.dtype not in DTYPES:
            raise ValueError(f"dtype must be one of {sorted(DTYPES)}")

    @property
    def torch_dtype(self) -> torch.dtype:
        return DTYPES[self.dtype]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["skip_channels"] = list(self.skip_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        return cls(**d)


@dataclass
class ParamStore:
    """Named parameter tensors of one generator, with an optional clipping box."""

    config: NetworkConfig
    params: OrderedDict = field(default_factory=OrderedDict)
    clip_bound: float | None = None
    seed: int = 0

    def __getitem__(self, name: str) -> torch.Tensor:
        return self.params[name]

    def __iter__(self):
        return iter(self.params.values())

    def items(self):
        return self.params.items()

    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.params.values())

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def grads(self) -> dict:
        return {k: p.grad for k, p in self.params.items()}

    def flat(self) -> np.ndarray:
        return np.concatenate([p.detach().cpu().numpy().ravel() for p in self.params.values()])

    def copy(self) -> "ParamStore":
        params = OrderedDict(
            (k, p.detach().clone().requires_grad_(True)) for k, p in self.params.items()
        )
        return ParamStore(self.config, params, self.clip_bound, self.seed)

    def max_abs(self) -> float:
        return max(float(p.detach().abs().max()) for p in self.params.values())


def _layer_specs(cfg: NetworkConfig):
    """(name, out_channels, in_channels, kernel, affine) for every convolution."""
    c = cfg.channels_per_layer
    specs = []
    cin = cfg.input_channels
    for i in range(cfg.scales):
        if cfg.skip_channels[i]:
            specs.append((f"skip{i}", cfg.skip_channels[i], cin, 1, True))
        specs.append((f"enc{i}.down", c, cin, 3, True))
        specs.append((f"enc{i}.conv", c, c, 3, True))
        cin = c
    for i in reversed(range(cfg.scales)):
        specs.append((f"dec{i}.conv3", c, c + cfg.skip_channels[i], 3, True))
        specs.append((f"dec{i}.conv1", c, c, 1, True))
    specs.append(("out", 1, c, 1, False))
    return specs


# Floor on the initial output intensity; keeps the output bias well inside the sigmoid's range.
MIN_OUTPUT_MEAN = 1e-3


def count_parameters(cfg: NetworkConfig) -> int:
    total = 0
    for _, cout, cin, k, affine in _layer_specs(cfg):
        total += cout * cin * k * k + cout + (2 * cout if affine else 0)
    return total


def init_params(
    cfg: NetworkConfig, seed: int, clip_bound: float | None = None, output_mean: float | None = None
) -> ParamStore:
    """Kaiming-uniform kernels (leaky-ReLU gain), zero biases, unit affine scales.

    ``output_mean`` sets the output bias to its logit, so the untrained output
    starts near that intensity instead of 0.5.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    gain = math.sqrt(2.0 / (1.0 + ops.LEAKY_SLOPE**2))
    dtype = cfg.torch_dtype
    params = OrderedDict()
    for name, cout, cin, k, affine in _layer_specs(cfg):
        bound = gain * math.sqrt(3.0 / (cin * k * k))
        params[f"{name}.weight"] = rng.uniform(-bound, bound, (cout, cin, k, k))
        params[f"{name}.bias"] = np.zeros(cout)
        if affine:
            params[f"{name}.scale"] = np.ones(cout)
            params[f"{name}.shift"] = np.zeros(cout)
    if output_mean is not None:
        m = min(max(float(output_mean), MIN_OUTPUT_MEAN), 1.0 - MIN_OUTPUT_MEAN)
        params["out.bias"][:] = math.log(m / (1.0 - m))
    store = OrderedDict(
        (k, torch.tensor(v, dtype=dtype, requires_grad=True)) for k, v in params.items()
    )
    return ParamStore(cfg, store, clip_bound, seed)


def make_input(cfg: NetworkConfig, seed: int, std: float = 0.1) -> torch.Tensor:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 2]))
    z = rng.normal(0.0, std, (1, cfg.input_channels, cfg.output_size, cfg.output_size))
    return torch.tensor(z, dtype=cfg.torch_dtype)


def build_network(
    cfg: NetworkConfig, seed: int = 0, clip_bound: float | None = None, output_mean: float | None = None
) -> tuple[ParamStore, torch.Tensor]:
    return init_params(cfg, seed, clip_bound, output_mean), make_input(cfg, seed)


def _block(x, params: ParamStore, name: str, stride: int = 1):
    x = ops.conv2d(x, params[f"{name}.weight"], params[f"{name}.bias"], stride=stride)
    if params.config.normalization == "batch":
        x = ops.batch_standardize(x)
    x = ops.channel_affine(x, params[f"{name}.scale"], params[f"{name}.shift"])
    return ops.leaky_relu(x)


def forward(params: ParamStore, z: torch.Tensor) -> torch.Tensor:
    """Generator output of shape ``(batch, 1, N, N)`` with values in (0, 1)."""
    cfg = params.config
    if z.dim() == 3:
        z = z.unsqueeze(0)
    if z.shape[1] != cfg.input_channels or z.shape[-1] != cfg.output_size:
        raise ValueError(f"input of shape {tuple(z.shape)} does not match {cfg}")
    skips = []
    x = z
    for i in range(cfg.scales):
        skips.append(_block(x, params, f"skip{i}") if cfg.skip_channels[i] else None)
        x = _block(x, params, f"enc{i}.down", stride=2)
        x = _block(x, params, f"enc{i}.conv")
    for i in reversed(range(cfg.scales)):
        x = ops.upsample(x)
        if skips[i] is not None:
            x = ops.concat([x, skips[i]])
        x = _block(x, params, f"dec{i}.conv3")
        x = _block(x, params, f"dec{i}.conv1")
    x = ops.conv2d(x, params["out.weight"], params["out.bias"])
    return ops.sigmoid(x)
