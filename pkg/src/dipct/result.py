from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


@dataclass
class TraceEntry:
    iteration: int
    loss: float
    psnr: float | None = None
    ssim: float | None = None
    discrepancy: float | None = None


@dataclass
class ReconstructionResult:
    image: np.ndarray
    method: str
    trace: list[TraceEntry] = field(default_factory=list)
    wall_time: float = 0.0
    iterations_run: int = 0
    info: dict = field(default_factory=dict)

    def trace_values(self, name: str) -> np.ndarray:
        return np.array([getattr(t, name) for t in self.trace], dtype=float)

    def write_trace_csv(self, path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["iteration", "loss", "discrepancy", "psnr", "ssim"])
            for t in self.trace:
                writer.writerow(
                    [t.iteration, _fmt(t.loss), _fmt(t.discrepancy), _fmt(t.psnr), _fmt(t.ssim)]
                )
        return path


def _fmt(v):
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return ""
    return repr(float(v))
