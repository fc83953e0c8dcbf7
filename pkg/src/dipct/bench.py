"""Benchmark runner over methods and training-set sizes, plus CSV/plot reports.

Every cell ``(method, size)`` picks its hyperparameters on a validation split
and is scored on one shared test subset.  Data-free methods are run once,
tuned on the validation split of the smallest requested size, and reported
with ``size = 0``.
"""

from __future__ import annotations

import concurrent.futures as cf
import csv
import io as _io
import itertools
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import metrics
from .datasim import DataPair, Dataset, load_dataset, make_dataset
from .dip import DipConfig, dip_reconstruct, dip_with_initial, diptv_reconstruct
from .fbp import FbpFilter, fbp_reconstruct
from .nn import NetworkConfig
from .postproc import TrainConfig, apply_postprocessor, train_postprocessor
from .variational import Discrepancy, TvConfig, tv_reconstruct

log = logging.getLogger(__name__)

DATA_FREE = ("fbp", "tv", "dip", "diptv")
LEARNED = ("fbp-unet", "dip-init")
METHODS = DATA_FREE + LEARNED

# percentage of the full Ellipses training set -> (#train, #val)
ELLIPSES_SIZES = {
    "0.1%": (32, 3),
    "0.2%": (64, 6),
    "0.5%": (160, 16),
    "1%": (320, 32),
    "2%": (640, 64),
    "5%": (1600, 160),
    "10%": (3200, 320),
    "25%": (8000, 800),
    "50%": (16000, 1600),
    "100%": (32000, 3200),
}
SIZE_PRESETS = {"ellipses": ELLIPSES_SIZES}

CSV_COLUMNS = ("method", "size", "psnr_mean", "psnr_std", "ssim_mean", "ssim_std", "time_per_recon", "hyperparams")


class BenchmarkError(RuntimeError):
    pass


@dataclass
class MethodSpec:
    """A method, a search grid (name -> candidate list) and fixed settings."""

    name: str
    grid: dict = field(default_factory=dict)
    fixed: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.name not in METHODS:
            raise ValueError(f"unknown method {self.name!r}; expected one of {list(METHODS)}")
        for k, v in self.grid.items():
            if not isinstance(v, (list, tuple)) or not v:
                raise ValueError(f"grid entry {k!r} of {self.name} must be a non-empty list")

    def candidates(self) -> list[dict]:
        keys = list(self.grid)
        return [dict(self.fixed, **dict(zip(keys, combo))) for combo in itertools.product(*(self.grid[k] for k in keys))]


@dataclass
class BenchmarkSpec:
    methods: list[MethodSpec]
    sizes: list = field(default_factory=lambda: [32])
    profile: str = "ellipses"
    n_test_samples: int = 100
    seed: int = 0
    out_dir: str | None = None
    data_dir: str | None = None
    image_size: int | None = None
    max_ellipses: int = 10

    def __post_init__(self):
        self.methods = [m if isinstance(m, MethodSpec) else MethodSpec(**m) for m in self.methods]
        if not self.methods:
            raise ValueError("at least one method is required")
        if self.n_test_samples < 1:
            raise ValueError("n_test_samples must be >= 1")
        self.resolved_sizes()

    def resolved_sizes(self) -> list[tuple[int, int]]:
        """``(#train, #val)`` for each requested size."""
        preset = SIZE_PRESETS.get(self.profile, ELLIPSES_SIZES)
        by_train = dict(preset.values())
        out = []
        for s in self.sizes:
            if isinstance(s, str):
                if s not in preset:
                    raise ValueError(f"unknown size {s!r}; presets are {list(preset)}")
                out.append(preset[s])
                continue
            if isinstance(s, (list, tuple)):
                n_train, n_val = int(s[0]), int(s[1])
            else:
                n_train = int(s)
                n_val = by_train.get(n_train, max(1, round(n_train / 10)))
            if n_train < 1 or n_val < 1:
                raise ValueError(f"sizes must be positive, got {s!r}")
            out.append((n_train, n_val))
        if not out:
            raise ValueError("at least one size is required")
        return out

    def to_dict(self) -> dict:
        d = asdict(self)
        d["sizes"] = list(self.sizes)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "BenchmarkSpec":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown benchmark spec keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class ReportRow:
    method: str
    size: int
    psnr_mean: float
    psnr_std: float
    ssim_mean: float
    ssim_std: float
    time_per_recon: float
    hyperparams: dict


@dataclass
class BenchmarkReport:
    rows: list[ReportRow]
    failures: list[str] = field(default_factory=list)

    def row(self, method: str, size: int = 0) -> ReportRow:
        for r in self.rows:
            if r.method == method and r.size == size:
                return r
        raise KeyError((method, size))


# -- reconstructors ----------------------------------------------------------


def _net(hp: dict, image_size: int, default: NetworkConfig) -> NetworkConfig:
    d = default.to_dict()
    over = hp.get("net", {})
    d.update(over)
    if "scales" in over and "skip_channels" not in over:
        # keep the default per-scale skip width when only the depth is overridden
        d["skip_channels"] = [default.skip_channels[0]] * int(over["scales"])
    d["output_size"] = image_size
    return NetworkConfig.from_dict(d)


DEFAULT_DIP_NET = NetworkConfig(scales=5, channels_per_layer=32, skip_channels=(4,) * 5, dtype="float32")


def _dip_config(hp: dict, ds: Dataset, alpha: float) -> DipConfig:
    return DipConfig(
        net=_net(hp, ds.geometry.image_size, DEFAULT_DIP_NET),
        lr=hp.get("lr", 1e-3),
        iterations=int(hp.get("iterations", 2000)),
        alpha=alpha,
        discrepancy=Discrepancy.for_noise(ds.noise),
        seed=hp.get("seed", 0),
        trace_every=int(hp.get("trace_every", 50)),
        stop_delta=hp.get("stop_delta"),
        clip_bound=hp.get("clip_bound", 100.0),
        init_iterations=int(hp.get("init_iterations", 1000)),
        init_lr=hp.get("init_lr"),
    )


def _fbp_filter(hp: dict) -> FbpFilter:
    return FbpFilter(hp.get("filter", "hann"), hp.get("frequency_scaling", 1.0))


def _data_free(method: str, hp: dict, ds: Dataset):
    g = ds.geometry
    if method == "fbp":
        filt = _fbp_filter(hp)
        return lambda y: fbp_reconstruct(y, g, filt)
    if method == "tv":
        cfg = TvConfig(alpha=hp.get("alpha", 1.0), iterations=int(hp.get("iterations", 500)))
        disc = Discrepancy.for_noise(ds.noise)
        return lambda y: tv_reconstruct(y, g, disc, cfg).image
    if method == "dip":
        cfg = _dip_config(hp, ds, 0.0)
        return lambda y: dip_reconstruct(y, g, cfg).image
    if method == "diptv":
        cfg = _dip_config(hp, ds, hp.get("alpha", 1.0))
        return lambda y: diptv_reconstruct(y, g, cfg).image
    raise ValueError(method)


def _train_cfg(hp: dict, ds: Dataset) -> TrainConfig:
    default = TrainConfig()
    return TrainConfig(
        net=_net(hp, ds.geometry.image_size, default.net),
        epochs=int(hp.get("epochs", default.epochs)),
        batch_size=int(hp.get("batch_size", default.batch_size)),
        lr=hp.get("lr", default.lr),
        seed=hp.get("seed", 0),
        fbp_filter=_fbp_filter({"filter": "hann", "frequency_scaling": 0.6, **hp.get("fbp", {})}),
    )


def _score(images, pairs) -> tuple[np.ndarray, np.ndarray]:
    p = np.array([metrics.psnr(im, pr.ground_truth) for im, pr in zip(images, pairs)])
    s = np.array([metrics.ssim(im, pr.ground_truth) for im, pr in zip(images, pairs)])
    return p, s


def _select(candidates: list[dict], make, val: list[DataPair]) -> dict:
    """Candidate maximising mean validation PSNR; earlier candidates win ties."""
    if len(candidates) == 1:
        return candidates[0]
    best, best_score = None, -math.inf
    for hp in candidates:
        recon = make(hp)
        score = float(np.mean(_score([recon(p.observation) for p in val], val)[0]))
        log.info("  candidate %s: val psnr %.3f", json.dumps(hp, sort_keys=True), score)
        if score > best_score:
            best, best_score = hp, score
    return best


def _select_dip_iterations(hp: dict, ds: Dataset, val: list[DataPair]) -> dict:
    """Vanilla DIP: run the full budget once per validation pair, pick the best trace step."""
    cfg = _dip_config(hp, ds, 0.0)
    traces = [dip_reconstruct(p.observation, ds.geometry, cfg, gt=p.ground_truth).trace for p in val]
    steps = [e.iteration for e in traces[0]]
    mean_psnr = np.mean([[e.psnr for e in t] for t in traces], axis=0)
    it = steps[int(np.argmax(mean_psnr))]
    return dict(hp, iterations=max(int(it), 1))


def _run_cell(method: str, candidates: list[dict], ds: Dataset, n_train: int, n_val: int) -> ReportRow:
    val = ds.validation[:n_val]
    train = ds.train[:n_train]
    test = ds.test
    if method in DATA_FREE:
        if method == "dip" and len(candidates) == 1 and candidates[0].get("select_iterations", True):
            hp = _select_dip_iterations(candidates[0], ds, val)
        else:
            hp = _select(candidates, lambda h: _data_free(method, h, ds), val)
        recon = _data_free(method, hp, ds)
        size = 0
    else:
        sub = Dataset(ds.geometry, ds.noise, ds.seed, ds.profile, train, val, [], ds.max_ellipses)
        trained = {}

        def make(h):
            key = json.dumps({k: h.get(k) for k in ("net", "epochs", "batch_size", "lr", "seed", "fbp")}, sort_keys=True)
            if key not in trained:
                cfg = _train_cfg(h, sub)
                trained[key] = (train_postprocessor(sub, cfg)[0], cfg.fbp_filter)
            params, filt = trained[key]
            post = lambda y: apply_postprocessor(params, y, ds.geometry, filt)  # noqa: E731
            if method == "fbp-unet":
                return post
            cfg = _dip_config(h, ds, h.get("alpha", 1.0))
            return lambda y: dip_with_initial(y, ds.geometry, post(y), cfg).image

        hp = _select(candidates, make, val)
        recon = make(hp)
        size = n_train
    t0 = time.perf_counter()
    images = [recon(p.observation) for p in test]
    per = (time.perf_counter() - t0) / len(test)
    p, s = _score(images, test)
    return ReportRow(method, size, float(p.mean()), float(p.std()), float(s.mean()), float(s.std()), per, hp)


def _cell_job(args):
    import torch

    torch.set_num_threads(1)
    method, candidates, ds, n_train, n_val = args
    return _run_cell(method, candidates, ds, n_train, n_val)


def build_dataset(spec: BenchmarkSpec) -> Dataset:
    sizes = spec.resolved_sizes()
    need_train = max(n for n, _ in sizes) if any(m.name in LEARNED for m in spec.methods) else 0
    need_val = max(v for _, v in sizes)
    if spec.data_dir is not None:
        if not (Path(spec.data_dir) / "manifest.json").is_file():
            raise BenchmarkError(f"missing dataset at {spec.data_dir}")
        ds = load_dataset(spec.data_dir)
        if len(ds.train) < need_train or len(ds.validation) < need_val or len(ds.test) < spec.n_test_samples:
            raise BenchmarkError(
                f"dataset at {spec.data_dir} is too small for the requested sizes "
                f"(need {need_train}/{need_val}/{spec.n_test_samples} train/val/test pairs)"
            )
        ds.test = ds.test[: spec.n_test_samples]
        return ds
    return make_dataset(
        need_train, need_val, spec.n_test_samples, spec.profile, spec.seed, spec.image_size, max_ellipses=spec.max_ellipses
    )


def run_benchmark(spec: BenchmarkSpec, jobs: int = 1, dataset: Dataset | None = None) -> BenchmarkReport:
    ds = dataset if dataset is not None else build_dataset(spec)
    sizes = spec.resolved_sizes()
    smallest = min(sizes)
    cells = []
    for m in spec.methods:
        cand = m.candidates()
        if m.name in DATA_FREE:
            cells.append((m.name, cand, ds, 0, smallest[1]))
        else:
            cells.extend((m.name, cand, ds, n, v) for n, v in sizes)
    rows: list[ReportRow | None] = [None] * len(cells)
    failures = []

    def record(i, fut_or_row):
        try:
            rows[i] = fut_or_row.result() if isinstance(fut_or_row, cf.Future) else fut_or_row
            log.info("done %s size %d: psnr %.2f", rows[i].method, rows[i].size, rows[i].psnr_mean)
        except Exception as exc:  # a failed cell is reported, the others still run
            name, _, _, n, _ = cells[i]
            failures.append(f"{name} size {n}: {exc}")
            log.error("cell %s size %d failed: %s", name, n, exc)

    if jobs <= 1 or len(cells) == 1:
        for i, c in enumerate(cells):
            log.info("running %s size %d", c[0], c[3])
            try:
                row = _run_cell(*c)
            except Exception as exc:
                failures.append(f"{c[0]} size {c[3]}: {exc}")
                log.error("cell %s size %d failed: %s", c[0], c[3], exc)
                continue
            record(i, row)
    else:
        with cf.ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = {pool.submit(_cell_job, c): i for i, c in enumerate(cells)}
            for fut in cf.as_completed(futures):
                record(futures[fut], fut)
    done = [r for r in rows if r is not None]
    return BenchmarkReport(done, failures)


# -- reports -----------------------------------------------------------------


def report_to_csv(report: BenchmarkReport) -> str:
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in report.rows:
        w.writerow(
            [
                r.method,
                r.size,
                repr(r.psnr_mean),
                repr(r.psnr_std),
                repr(r.ssim_mean),
                repr(r.ssim_std),
                repr(r.time_per_recon),
                json.dumps(r.hyperparams, sort_keys=True),
            ]
        )
    return buf.getvalue()


def parse_report_csv(text: str) -> BenchmarkReport:
    reader = csv.reader(_io.StringIO(text))
    header = next(reader, None)
    if header is None or tuple(header) != CSV_COLUMNS:
        raise ValueError(f"not a benchmark report: expected columns {CSV_COLUMNS}")
    rows = []
    for rec in reader:
        if not rec:
            continue
        if len(rec) != len(CSV_COLUMNS):
            raise ValueError(f"malformed report row {rec!r}")
        rows.append(ReportRow(rec[0], int(rec[1]), *(float(v) for v in rec[2:7]), json.loads(rec[7])))
    return BenchmarkReport(rows)


def plot_report(report: BenchmarkReport, path) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    path = Path(path)
    fig, ax = plt.subplots(figsize=(7, 4.5))
    learned = sorted({r.method for r in report.rows if r.size > 0})
    sizes = sorted({r.size for r in report.rows if r.size > 0}) or [1, 10]
    for name in learned:
        pts = sorted((r.size, r.psnr_mean) for r in report.rows if r.method == name and r.size > 0)
        ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=name)
    styles = itertools.cycle(["--", ":", "-.", (0, (5, 1))])
    for r in report.rows:
        if r.size == 0:
            ax.axhline(r.psnr_mean, linestyle=next(styles), color="gray" if r.method == "fbp" else None, label=r.method)
    ax.set_xscale("log")
    ax.set_xlim(min(sizes) / 1.5, max(sizes) * 1.5)
    ax.set_xlabel("training pairs")
    ax.set_ylabel("mean PSNR [dB]")
    ax.grid(True, which="both", alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    # fixed metadata keeps the file byte-identical across runs
    fig.savefig(path, format="png", dpi=100, metadata={"Software": None})
    plt.close(fig)
    return path


def render_report(report: BenchmarkReport, out_dir, stem: str = "report") -> dict:
    if not report.rows:
        raise ValueError("report has no rows")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / f"{stem}.csv"
    csv_path.write_text(report_to_csv(report))
    png_path = plot_report(report, out_dir / f"{stem}.png")
    return {"csv": csv_path, "plot": png_path}
