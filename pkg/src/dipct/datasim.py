"""Random ellipse phantoms, noisy observation simulation and dataset storage.

Phantom sampler constants (the reference dataset library's sampler is not
reproduced; these are this package's own frozen choices):

* number of ellipses uniform in ``3 .. max_ellipses``
* amplitude uniform in ``[0.1, 1]``
* half-axes log-uniform in ``[0.04, 0.5]`` (image domain is ``[-1, 1]^2``)
* centre uniform in the disk of radius 0.7, rotation uniform in ``[0, pi)``
* sum clipped to ``[0, 1]``, zeroed outside the inscribed circle

Poisson simulation: counts ``k ~ Poisson(N0 * exp(-mu_max * Ax))`` per bin,
zero counts clamped to one, observation ``-ln(k / N0) / mu_max`` (post-log,
in the same units as ``Ax``).  ``mu_max`` defaults to ``ln(100) / diameter``,
so a chord across a full-density disk filling the inscribed circle lets 1% of
the photons through.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import io
from .operator import ParallelGeometry, forward_project

SPLITS = ("train", "validation", "test")
_SPLIT_CODE = {name: i for i, name in enumerate(SPLITS)}

N_ELLIPSES_MIN = 3
AMPLITUDE_RANGE = (0.1, 1.0)
AXIS_RANGE = (0.04, 0.5)
CENTRE_RADIUS = 0.7


@dataclass(frozen=True)
class EllipseSpec:
    value: float
    center: tuple[float, float]
    axes: tuple[float, float]
    rotation: float

    def __post_init__(self):
        if self.axes[0] <= 0 or self.axes[1] <= 0:
            raise ValueError("ellipse half-axes must be positive")


def rasterize(ellipses: list[EllipseSpec], size: int) -> np.ndarray:
    """Sum of ellipse indicators on the ``[-1, 1]^2`` grid, clipped and masked."""
    coords = (np.arange(size) - (size - 1) / 2) * (2.0 / size)
    x = coords[None, :]
    y = -coords[:, None]
    img = np.zeros((size, size))
    for e in ellipses:
        c, s = math.cos(e.rotation), math.sin(e.rotation)
        dx, dy = x - e.center[0], y - e.center[1]
        u = (c * dx + s * dy) / e.axes[0]
        v = (-s * dx + c * dy) / e.axes[1]
        img += e.value * (u**2 + v**2 <= 1.0)
    np.clip(img, 0.0, 1.0, out=img)
    img[x**2 + y**2 > 1.0] = 0.0
    return img


def sample_ellipses(rng: np.random.Generator, max_ellipses: int) -> list[EllipseSpec]:
    n = int(rng.integers(N_ELLIPSES_MIN, max(max_ellipses, N_ELLIPSES_MIN) + 1))
    log_lo, log_hi = np.log(AXIS_RANGE)
    out = []
    for _ in range(n):
        radius = CENTRE_RADIUS * math.sqrt(rng.uniform())
        angle = rng.uniform(0, 2 * np.pi)
        out.append(
            EllipseSpec(
                value=float(rng.uniform(*AMPLITUDE_RANGE)),
                center=(radius * math.cos(angle), radius * math.sin(angle)),
                axes=tuple(float(a) for a in np.exp(rng.uniform(log_lo, log_hi, size=2))),
                rotation=float(rng.uniform(0, np.pi)),
            )
        )
    return out


def generate_phantom(seed: int, size: int = 128, max_ellipses: int = 10) -> np.ndarray:
    if size < 8:
        raise ValueError("phantom size must be at least 8")
    rng = np.random.default_rng(seed)
    return rasterize(sample_ellipses(rng, max_ellipses), size)


@dataclass(frozen=True)
class NoiseModel:
    kind: str = "gaussian"
    gaussian_rel_std: float = 0.025
    photons_per_pixel: float = 4096.0
    mu_max: float = 1.0

    def __post_init__(self):
        if self.kind not in ("none", "gaussian", "poisson"):
            raise ValueError(f"unknown noise kind {self.kind!r}")
        if self.gaussian_rel_std < 0:
            raise ValueError("gaussian_rel_std must be >= 0")
        if self.photons_per_pixel <= 0 or self.mu_max <= 0:
            raise ValueError("photons_per_pixel and mu_max must be positive")


def default_mu_max(geom: ParallelGeometry) -> float:
    return math.log(100.0) / (geom.image_size * geom.pixel_spacing)


def simulate_observation(
    x: np.ndarray, geom: ParallelGeometry, noise: NoiseModel, seed: int | np.random.Generator
) -> np.ndarray:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    x = np.asarray(x, dtype=np.float64)
    if noise.kind == "poisson" and np.any(x < 0):
        raise ValueError("poisson simulation needs a non-negative image")
    clean = forward_project(x, geom)
    if noise.kind == "none":
        return clean
    if noise.kind == "gaussian":
        std = noise.gaussian_rel_std * np.mean(np.abs(clean))
        return clean + rng.normal(0.0, 1.0, clean.shape) * std
    return poisson_log_observation(clean, noise, rng)


def poisson_log_observation(clean: np.ndarray, noise: NoiseModel, rng: np.random.Generator):
    n0 = noise.photons_per_pixel
    counts = rng.poisson(n0 * np.exp(-noise.mu_max * clean))
    return -np.log(np.maximum(counts, 1) / n0) / noise.mu_max


def noise_level(noise: NoiseModel, y: np.ndarray) -> float:
    """Expected norm of the observation noise, estimated from the observation itself.

    Gaussian: ``sqrt(n) * rel_std * mean|y|``.  Poisson (post-log): per-bin
    variance ``1 / (mu_max**2 * E[k])`` by the delta method.
    """
    y = np.asarray(y, dtype=np.float64)
    if noise.kind == "none":
        return 0.0
    if noise.kind == "gaussian":
        return float(math.sqrt(y.size) * noise.gaussian_rel_std * np.mean(np.abs(y)))
    expected = noise.photons_per_pixel * np.exp(-noise.mu_max * y)
    return float(np.sqrt(np.sum(1.0 / (noise.mu_max**2 * np.maximum(expected, 1.0)))))


@dataclass
class DataPair:
    ground_truth: np.ndarray
    observation: np.ndarray


@dataclass
class Dataset:
    geometry: ParallelGeometry
    noise: NoiseModel
    seed: int
    profile: str
    train: list[DataPair] = field(default_factory=list)
    validation: list[DataPair] = field(default_factory=list)
    test: list[DataPair] = field(default_factory=list)
    max_ellipses: int = 10

    def split(self, name: str) -> list[DataPair]:
        if name not in _SPLIT_CODE:
            raise KeyError(f"unknown split {name!r}")
        return getattr(self, name)

    def manifest(self) -> dict:
        return {
            "format": "dipct-dataset/1",
            "profile": self.profile,
            "seed": self.seed,
            "max_ellipses": self.max_ellipses,
            "geometry": self.geometry.to_dict(),
            "noise": asdict(self.noise),
            "splits": {name: len(self.split(name)) for name in SPLITS},
            "pair_seeds": {
                name: [list(pair_seed(self.seed, name, i)) for i in range(len(self.split(name)))]
                for name in SPLITS
            },
        }


PROFILES = {
    "ellipses": {"image_size": 128, "n_angles": 30, "n_detectors": 183, "noise": "gaussian"},
    "lodopab-like": {"image_size": 128, "n_angles": 200, "n_detectors": 257, "noise": "poisson"},
    "lodopab-full": {"image_size": 362, "n_angles": 1000, "n_detectors": 513, "noise": "poisson"},
}


def profile_setup(profile: str, image_size: int | None = None) -> tuple[ParallelGeometry, NoiseModel]:
    try:
        p = PROFILES[profile]
    except KeyError:
        raise ValueError(f"unknown profile {profile!r}; expected one of {sorted(PROFILES)}") from None
    size = image_size or p["image_size"]
    if profile == "ellipses":
        n_det = p["n_detectors"] if image_size is None else math.ceil(math.sqrt(2) * size) + 1
        geom = ParallelGeometry(p["n_angles"], n_det, size)
        return geom, NoiseModel("gaussian")
    n_det = p["n_detectors"]
    geom = ParallelGeometry(p["n_angles"], n_det, size, detector_spacing=math.sqrt(2) * size / n_det)
    return geom, NoiseModel("poisson", mu_max=default_mu_max(geom))


def pair_seed(seed: int, split: str, index: int) -> tuple[int, int, int]:
    return (int(seed), _SPLIT_CODE[split], int(index))


def make_pair(seed: int, split: str, index: int, geom, noise, max_ellipses: int = 10) -> DataPair:
    ss = np.random.SeedSequence(pair_seed(seed, split, index))
    phantom_ss, noise_ss = ss.spawn(2)
    rng = np.random.default_rng(phantom_ss)
    gt = rasterize(sample_ellipses(rng, max_ellipses), geom.image_size)
    obs = simulate_observation(gt, geom, noise, np.random.default_rng(noise_ss))
    return DataPair(gt, obs)


def make_dataset(
    n_train: int,
    n_val: int,
    n_test: int,
    profile: str = "ellipses",
    seed: int = 0,
    image_size: int | None = None,
    noise: NoiseModel | None = None,
    max_ellipses: int = 10,
) -> Dataset:
    if min(n_train, n_val, n_test) < 0:
        raise ValueError("split sizes must be non-negative")
    geom, default_noise = profile_setup(profile, image_size)
    noise = noise or default_noise
    ds = Dataset(geom, noise, seed, profile, max_ellipses=max_ellipses)
    for name, count in zip(SPLITS, (n_train, n_val, n_test)):
        ds.split(name).extend(
            make_pair(seed, name, i, geom, noise, max_ellipses) for i in range(count)
        )
    return ds


def save_dataset(ds: Dataset, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name in SPLITS:
        split_dir = directory / name
        split_dir.mkdir(exist_ok=True)
        for i, pair in enumerate(ds.split(name)):
            io.save_array(split_dir / f"{i:06d}_gt.bin", pair.ground_truth)
            io.save_array(split_dir / f"{i:06d}_obs.bin", pair.observation)
    (directory / "manifest.json").write_text(json.dumps(ds.manifest(), indent=2) + "\n")
    return directory


def load_manifest(directory) -> dict:
    path = Path(directory) / "manifest.json"
    if not path.is_file():
        raise FileNotFoundError(f"no dataset manifest at {path}")
    return json.loads(path.read_text())


def load_dataset(directory, splits=SPLITS) -> Dataset:
    directory = Path(directory)
    m = load_manifest(directory)
    ds = Dataset(
        geometry=ParallelGeometry.from_dict(m["geometry"]),
        noise=NoiseModel(**m["noise"]),
        seed=m["seed"],
        profile=m["profile"],
        max_ellipses=m.get("max_ellipses", 10),
    )
    for name in splits:
        for i in range(m["splits"][name]):
            ds.split(name).append(
                DataPair(
                    io.load_array(directory / name / f"{i:06d}_gt.bin"),
                    io.load_array(directory / name / f"{i:06d}_obs.bin"),
                )
            )
    return ds
