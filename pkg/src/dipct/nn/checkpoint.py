"""Single-file parameter checkpoints.

Layout: ``b"DIPCTCKP"``, uint64 little-endian manifest length, UTF-8 JSON manifest
(network config, clip bound, seed, ``[name, shape]`` list, free-form extras),
then all parameters as little-endian float64 in manifest order.
"""

from __future__ import annotations

import json
import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np
import torch

from .network import NetworkConfig, ParamStore

MAGIC = b"DIPCTCKP"


def save_checkpoint(path, params: ParamStore, extra: dict | None = None) -> Path:
    path = Path(path)
    manifest = {
        "config": params.config.to_dict(),
        "clip_bound": params.clip_bound,
        "seed": params.seed,
        "tensors": [[name, list(p.shape)] for name, p in params.items()],
        "extra": extra or {},
    }
    header = json.dumps(manifest, sort_keys=True).encode("utf-8")
    payload = b"".join(
        np.ascontiguousarray(p.detach().cpu().numpy(), dtype="<f8").tobytes() for p in params
    )
    path.write_bytes(MAGIC + struct.pack("<Q", len(header)) + header + payload)
    return path


def load_checkpoint(path) -> tuple[ParamStore, dict]:
    buf = Path(path).read_bytes()
    if buf[:8] != MAGIC:
        raise ValueError(f"{path} is not a checkpoint file")
    (n,) = struct.unpack("<Q", buf[8:16])
    manifest = json.loads(buf[16 : 16 + n].decode("utf-8"))
    cfg = NetworkConfig.from_dict(manifest["config"])
    data = np.frombuffer(buf[16 + n :], dtype="<f8")
    params = OrderedDict()
    offset = 0
    for name, shape in manifest["tensors"]:
        size = int(np.prod(shape)) if shape else 1
        arr = data[offset : offset + size].reshape(shape)
        params[name] = torch.tensor(arr, dtype=cfg.torch_dtype, requires_grad=True)
        offset += size
    if offset != data.size:
        raise ValueError("checkpoint payload size does not match its manifest")
    store = ParamStore(cfg, params, manifest["clip_bound"], manifest["seed"])
    return store, manifest["extra"]
