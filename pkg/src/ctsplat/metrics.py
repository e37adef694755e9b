"""Held-out view metrics and the reduced-views study.

PSNR uses a peak of 1 since every projection is normalized to [0, 1]. SSIM
is the mean of :func:`ctsplat.losses.ssim_map`, the same function the D-SSIM
loss is built on. Spread across views is the sample (n-1) standard deviation.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataset import Dataset, as_dataset
from .formats import native_ply_size, write_csv
from .image import as_array
from .losses import ssim_map
from .rasterizer import rasterize
from .scene import GaussianCloud

log = logging.getLogger(__name__)

REPORT_COLUMNS = ("angle_deg", "psnr", "ssim")
SUMMARY_COLUMNS = ("train_fraction", "n_train", "n_test", "psnr_mean", "psnr_std",
                   "ssim_mean", "ssim_std", "n_gaussians", "model_bytes", "voxel_bytes")
VOXEL_BYTES = 4  # float32 per voxel in the dense reference volume


def psnr(a, b) -> float:
    """10 log10(1 / MSE) in dB; ``inf`` for identical images."""
    a, b = as_array(a), as_array(b)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def ssim(a, b) -> float:
    """Mean SSIM with the 11x11, sigma 1.5 Gaussian window."""
    return float(ssim_map(a, b).mean())


def mean_std(values) -> tuple[float, float]:
    """Mean and sample standard deviation (0 for a single value)."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise ValueError("no values to aggregate")
    if np.isinf(v).any():
        return float(v.mean()), math.nan
    mean = float(v.mean())
    std = float(v.std(ddof=1)) if v.size > 1 else 0.0
    return mean, std


def opacity_ambiguity(opacity, lo: float = 0.05, hi: float = 0.95) -> float:
    """Fraction of opacity-map pixels strictly inside ``(lo, hi)``."""
    o = np.asarray(opacity)
    return float(np.mean((o > lo) & (o < hi)))


@dataclass
class EvalReport:
    """Per-view metrics of one model on its held-out views."""

    rows: list[dict]
    train_fraction: float
    n_gaussians: int
    model_bytes: int
    voxel_bytes: int | None = None
    n_train: int = 0
    ambiguity: list[float] = field(default_factory=list)

    def __post_init__(self):
        if not self.rows:
            raise ValueError("an evaluation report needs at least one view")

    @property
    def psnr_mean(self) -> float:
        return mean_std([r["psnr"] for r in self.rows])[0]

    @property
    def psnr_std(self) -> float:
        return mean_std([r["psnr"] for r in self.rows])[1]

    @property
    def ssim_mean(self) -> float:
        return mean_std([r["ssim"] for r in self.rows])[0]

    @property
    def ssim_std(self) -> float:
        return mean_std([r["ssim"] for r in self.rows])[1]

    @property
    def ambiguity_mean(self) -> float:
        return float(np.mean(self.ambiguity)) if self.ambiguity else math.nan

    @property
    def size_ratio(self) -> float | None:
        """Model bytes over dense voxel bytes, when the phantom size is known."""
        if not self.voxel_bytes:
            return None
        return self.model_bytes / self.voxel_bytes

    def summary(self) -> dict:
        return {"train_fraction": self.train_fraction, "n_train": self.n_train,
                "n_test": len(self.rows), "psnr_mean": self.psnr_mean,
                "psnr_std": self.psnr_std, "ssim_mean": self.ssim_mean,
                "ssim_std": self.ssim_std, "n_gaussians": self.n_gaussians,
                "model_bytes": self.model_bytes,
                "voxel_bytes": "" if self.voxel_bytes is None else self.voxel_bytes}

    def write(self, path) -> None:
        write_csv(self.rows, path, REPORT_COLUMNS)

    def table(self) -> str:
        lines = [f"train fraction {self.train_fraction:g}: {self.n_train} train / "
                 f"{len(self.rows)} test views, {self.n_gaussians} Gaussians",
                 f"  PSNR {self.psnr_mean:.2f} +- {self.psnr_std:.2f} dB (sample std over views)",
                 f"  SSIM {self.ssim_mean:.4f} +- {self.ssim_std:.4f}",
                 f"  model {self.model_bytes} bytes"]
        if self.voxel_bytes:
            change = 100.0 * (1.0 - self.size_ratio)
            lines.append(f"  dense voxels {self.voxel_bytes} bytes "
                         f"(model is {abs(change):.1f}% {'smaller' if change >= 0 else 'larger'})")
        return "\n".join(lines)


def voxel_bytes_of(dataset: Dataset) -> int | None:
    """Dense float32 size of the phantom recorded in the manifest, if any."""
    ph = dataset.manifest.extra.get("phantom")
    if not ph or "dims" not in ph:
        return None
    return int(np.prod(ph["dims"])) * VOXEL_BYTES


def evaluate(cloud: GaussianCloud, data, test_indices, train_fraction: float = math.nan,
             n_train: int = 0, background: float = 0.0) -> EvalReport:
    """Render every test view and score it against the ground truth.

    Views are processed in the given index order, so the report is a pure
    function of the cloud and the data.
    """
    ds = as_dataset(data)
    test_indices = [int(k) for k in test_indices]
    if not test_indices:
        raise ValueError("evaluation needs a non-empty test set")
    geom = ds.geometry
    rows, amb = [], []
    for k in test_indices:
        if not 0 <= k < len(ds):
            raise IndexError(f"test view {k} out of range for {len(ds)} views")
        res = rasterize(cloud, ds.poses[k], geom.image_width, geom.image_height, background)
        img = res.image()
        rows.append({"angle_deg": float(ds.angles_deg[k]),
                     "psnr": psnr(img, ds.images[k]),
                     "ssim": ssim(img, ds.images[k])})
        amb.append(opacity_ambiguity(res.opacity))
    return EvalReport(rows, float(train_fraction), len(cloud),
                      native_ply_size(len(cloud), cloud.scene_extent),
                      voxel_bytes_of(ds), n_train, amb)


def sweep_fractions(data, fractions, config=None, out_dir=None) -> list[EvalReport]:
    """Train one model per training fraction and evaluate each on its held-out views.

    Every run starts from the same initialization and seed. With ``out_dir``
    each run's outputs land in ``frac_<fraction>/`` plus a combined
    ``sweep.csv``.
    """
    from dataclasses import replace

    from .trainer import TrainConfig, initial_cloud, train

    fractions = [float(f) for f in fractions]
    if not fractions:
        raise ValueError("no fractions given")
    bad = [f for f in fractions if not 0.0 < f <= 1.0]
    if bad:
        raise ValueError(f"fractions must lie in (0, 1], got {bad}")
    config = config or TrainConfig()
    ds = as_dataset(data)
    init = initial_cloud(ds, config)
    reports = []
    for f in fractions:
        cfg = replace(config, train_fraction=f)
        run_dir = None if out_dir is None else Path(out_dir) / f"frac_{f:g}"
        res = train(ds, cfg, out_dir=run_dir, init=init)
        if len(res.test_indices) == 0:
            raise ValueError(f"train fraction {f} leaves no held-out views")
        rep = evaluate(res.cloud, ds, res.test_indices, f, len(res.train_indices), cfg.background)
        if run_dir is not None:
            rep.write(run_dir / "metrics.csv")
        log.info("fraction %g: PSNR %.2f SSIM %.4f", f, rep.psnr_mean, rep.ssim_mean)
        reports.append(rep)
    if out_dir is not None:
        write_summary(reports, Path(out_dir) / "sweep.csv")
    return reports


def write_summary(reports, path) -> None:
    write_csv([r.summary() for r in reports], path, SUMMARY_COLUMNS)


def sweep_table(reports) -> str:
    """Fractions as columns, metrics as rows."""
    head = f"{'':<14}" + "".join(f"{f'{100 * r.train_fraction:g}% views':>18}" for r in reports)
    ps = f"{'PSNR (dB)':<14}" + "".join(f"{f'{r.psnr_mean:.2f} +- {r.psnr_std:.2f}':>18}"
                                        for r in reports)
    ss = f"{'SSIM':<14}" + "".join(f"{f'{r.ssim_mean:.3f} +- {r.ssim_std:.3f}':>18}"
                                   for r in reports)
    ng = f"{'Gaussians':<14}" + "".join(f"{r.n_gaussians:>18}" for r in reports)
    return "\n".join([head, ps, ss, ng])
