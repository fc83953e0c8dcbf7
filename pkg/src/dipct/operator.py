"""Discrete 2D parallel-beam Radon transform (Joseph projector) and its adjoint.

Coordinates: column ``j`` of an image sits at ``x = (j - (N-1)/2) * pixel_spacing``
and row ``r`` at ``y = ((N-1)/2 - r) * pixel_spacing`` (row 0 is the top).  A ray
with detector offset ``s`` and angle ``phi`` is ``L(t) = s*w(phi) + t*w_perp(phi)``
with ``w = (cos, sin)`` and ``w_perp = (-sin, cos)``.

The operator is assembled once per geometry as a sparse matrix; the forward
projection and the backprojection are products with that matrix and its
transpose, so the pair is adjoint to rounding error.  Very large geometries,
whose matrix would not fit in memory, fall back to an angle-by-angle matrix-free
evaluation that uses the same weights.
"""

from __future__ import annotations

import functools
import math
import warnings
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

# geometries whose system matrix would exceed this many nonzeros are applied matrix-free
MAX_MATRIX_NNZ = 60_000_000


@dataclass(frozen=True)
class ParallelGeometry:
    """Parallel-beam acquisition geometry for a square image.

    Angles are equispaced in ``[0, pi)``; the detector is centered on the
    rotation axis with bin ``i`` at offset
    ``(i - (n_detectors - 1) / 2) * detector_spacing``.
    """

    n_angles: int
    n_detectors: int
    image_size: int
    detector_spacing: float = 1.0
    pixel_spacing: float = 1.0

    def __post_init__(self):
        if self.n_angles < 1 or self.n_detectors < 1 or self.image_size < 1:
            raise ValueError(f"geometry counts must be positive: {self}")
        if self.detector_spacing <= 0 or self.pixel_spacing <= 0:
            raise ValueError(f"geometry spacings must be positive: {self}")
        span = self.n_detectors * self.detector_spacing
        diagonal = math.sqrt(2.0) * self.image_size * self.pixel_spacing
        if span < diagonal * (1 - 1e-9) and self.image_size > 1:
            warnings.warn(
                f"detector span {span:.4g} does not cover the image diagonal {diagonal:.4g}",
                stacklevel=2,
            )

    @property
    def angles(self) -> np.ndarray:
        return np.arange(self.n_angles) * (np.pi / self.n_angles)

    @property
    def detector_offsets(self) -> np.ndarray:
        return (np.arange(self.n_detectors) - (self.n_detectors - 1) / 2) * self.detector_spacing

    @property
    def image_shape(self) -> tuple[int, int]:
        return (self.image_size, self.image_size)

    @property
    def sino_shape(self) -> tuple[int, int]:
        return (self.n_angles, self.n_detectors)

    def to_dict(self) -> dict:
        return {
            "n_angles": self.n_angles,
            "n_detectors": self.n_detectors,
            "image_size": self.image_size,
            "detector_spacing": self.detector_spacing,
            "pixel_spacing": self.pixel_spacing,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ParallelGeometry":
        return cls(
            n_angles=int(d["n_angles"]),
            n_detectors=int(d["n_detectors"]),
            image_size=int(d["image_size"]),
            detector_spacing=float(d["detector_spacing"]),
            pixel_spacing=float(d["pixel_spacing"]),
        )


def _angle_weights(geom: ParallelGeometry, a: int):
    """Joseph weights for one angle as ``(detector_index, pixel_index, weight)``."""
    n = geom.image_size
    ps = geom.pixel_spacing
    phi = geom.angles[a]
    c, s = math.cos(phi), math.sin(phi)
    offsets = geom.detector_offsets[:, None]
    centre = (n - 1) / 2
    line = (np.arange(n) - centre) * ps  # pixel-centre coordinates along the driving axis

    if abs(c) >= abs(s):
        # ray runs mostly along y: step through rows, interpolate across columns
        y = -line[None, :]  # row r has y = (centre - r) * ps
        x = (offsets - y * s) / c
        frac_index = x / ps + centre
        length = ps / abs(c)
        rows = np.broadcast_to(np.arange(n)[None, :], frac_index.shape)
        lo = np.floor(frac_index).astype(np.int64)

        def pixel(k):
            return rows * n + k
    else:
        x = line[None, :]
        y = (offsets - x * c) / s
        frac_index = centre - y / ps
        length = ps / abs(s)
        cols = np.broadcast_to(np.arange(n)[None, :], frac_index.shape)
        lo = np.floor(frac_index).astype(np.int64)

        def pixel(k):
            return k * n + cols

    w_hi = frac_index - lo
    det = np.broadcast_to(np.arange(geom.n_detectors)[:, None], frac_index.shape)
    parts = []
    for k, w in ((lo, 1.0 - w_hi), (lo + 1, w_hi)):
        inside = (k >= 0) & (k < n) & (w > 0)
        parts.append((det[inside], pixel(k)[inside], w[inside] * length))
    det_idx = np.concatenate([p[0] for p in parts])
    pix_idx = np.concatenate([p[1] for p in parts])
    weights = np.concatenate([p[2] for p in parts])
    return det_idx, pix_idx, weights


def estimated_nnz(geom: ParallelGeometry) -> int:
    return 2 * geom.n_angles * geom.n_detectors * geom.image_size


@functools.lru_cache(maxsize=8)
def system_matrix(geom: ParallelGeometry) -> sp.csr_matrix:
    """Sparse ``(n_angles*n_detectors, N*N)`` matrix of the forward projection."""
    rows, cols, vals = [], [], []
    for a in range(geom.n_angles):
        det_idx, pix_idx, w = _angle_weights(geom, a)
        rows.append(det_idx + a * geom.n_detectors)
        cols.append(pix_idx)
        vals.append(w)
    shape = (geom.n_angles * geom.n_detectors, geom.image_size**2)
    mat = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=shape
    ).tocsr()
    mat.sum_duplicates()
    return mat


@functools.lru_cache(maxsize=8)
def _transpose_matrix(geom: ParallelGeometry) -> sp.csr_matrix:
    return system_matrix(geom).T.tocsr()


def _use_matrix(geom: ParallelGeometry) -> bool:
    return estimated_nnz(geom) <= MAX_MATRIX_NNZ


def _check_image(arr: np.ndarray, geom: ParallelGeometry) -> np.ndarray:
    arr = np.asarray(arr)
    if arr.shape[-2:] != geom.image_shape:
        raise ValueError(f"image has shape {arr.shape}, geometry expects {geom.image_shape}")
    return arr.astype(np.float64, copy=False)


def _check_sino(arr: np.ndarray, geom: ParallelGeometry) -> np.ndarray:
    arr = np.asarray(arr)
    if arr.shape[-2:] != geom.sino_shape:
        raise ValueError(f"sinogram has shape {arr.shape}, geometry expects {geom.sino_shape}")
    return arr.astype(np.float64, copy=False)


def forward_project(image: np.ndarray, geom: ParallelGeometry) -> np.ndarray:
    """Line integrals of ``image`` for every (angle, detector) pair.

    Leading batch dimensions are allowed: ``(..., N, N) -> (..., n_angles, n_detectors)``.
    """
    image = _check_image(image, geom)
    batch = image.shape[:-2]
    flat = image.reshape(-1, geom.image_size**2)
    if _use_matrix(geom):
        out = (system_matrix(geom) @ flat.T).T
    else:
        out = np.empty((flat.shape[0], geom.n_angles, geom.n_detectors))
        for a in range(geom.n_angles):
            det_idx, pix_idx, w = _angle_weights(geom, a)
            for b in range(flat.shape[0]):
                out[b, a] = np.bincount(
                    det_idx, weights=w * flat[b, pix_idx], minlength=geom.n_detectors
                )
    return out.reshape(batch + geom.sino_shape)


def back_project(sino: np.ndarray, geom: ParallelGeometry) -> np.ndarray:
    """Exact transpose of :func:`forward_project` (same batching rules)."""
    sino = _check_sino(sino, geom)
    batch = sino.shape[:-2]
    flat = sino.reshape(-1, geom.n_angles, geom.n_detectors)
    if _use_matrix(geom):
        out = (_transpose_matrix(geom) @ flat.reshape(flat.shape[0], -1).T).T
    else:
        out = np.zeros((flat.shape[0], geom.image_size**2))
        for a in range(geom.n_angles):
            det_idx, pix_idx, w = _angle_weights(geom, a)
            for b in range(flat.shape[0]):
                out[b] += np.bincount(
                    pix_idx, weights=w * flat[b, a][det_idx], minlength=out.shape[1]
                )
    return out.reshape(batch + geom.image_shape)


def operator_norm(
    geom: ParallelGeometry, iters: int = 50, seed: int = 0, x0: np.ndarray | None = None
) -> float:
    """Power-iteration estimate of the spectral norm of the forward projection."""
    if iters < 1:
        raise ValueError("iters must be >= 1")
    if x0 is None:
        x = np.random.default_rng(seed).standard_normal(geom.image_shape)
    else:
        x = np.array(_check_image(x0, geom), dtype=np.float64).reshape(geom.image_shape)
    x = x / np.linalg.norm(x)
    estimate = 0.0
    for _ in range(iters):
        y = back_project(forward_project(x, geom), geom)
        estimate = float(np.sqrt(np.vdot(x, y)))
        norm = np.linalg.norm(y)
        if norm == 0:
            return 0.0
        x = y / norm
    return estimate
