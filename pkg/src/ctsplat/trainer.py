"""Fit a Gaussian cloud to the training views of a scan.

Each iteration renders one training view, evaluates the weighted loss,
backpropagates through the rasterizer, takes an Adam step per parameter group
and, on schedule, clones/splits/prunes Gaussians.
"""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .dataset import Dataset, as_dataset
from .formats import LOG_COLUMNS, write_csv, write_ply
from .losses import LossWeights, total_loss
from .rasterizer import GradientBuffer, rasterize, render_backward
from .scene import (PARAM_GROUPS, Ellipsoid, GaussianCloud, init_ellipsoid_cloud, logit,
                    quaternion_to_matrix)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 20_000
    weights: LossWeights = field(default_factory=LossWeights)
    # position rates are multiplied by the scene extent
    lr_position_init: float = 1.6e-4
    lr_position_final: float = 1.6e-6
    lr_log_scale: float = 5e-3
    lr_rotation: float = 1e-3
    lr_opacity: float = 5e-2
    lr_intensity: float = 2.5e-3
    densify_from: int = 500
    densify_until: int = 15_000
    densify_interval: int = 100
    densify_grad_threshold: float = 2e-4
    prune_opacity_threshold: float = 0.005
    opacity_reset_interval: int = 3000
    opacity_reset_value: float = 0.01
    split_scale_factor: float = 1.6
    clone_scale_fraction: float = 0.01
    max_gaussians: int | None = None
    train_fraction: float = 0.5
    seed: int = 0
    checkpoint_interval: int = 5000
    n_init: int = 10_000
    init_opacity: float = 0.1
    init_intensity: float = 0.5
    background: float = 0.0

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be at least 1")
        if not 0.0 < self.train_fraction <= 1.0:
            raise ValueError(f"train_fraction must lie in (0, 1], got {self.train_fraction}")
        for name in ("densify_grad_threshold", "prune_opacity_threshold", "split_scale_factor",
                     "densify_interval", "opacity_reset_interval"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d.update(d.pop("weights"))
        return d

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        d = dict(d)
        wnames = {f.name for f in fields(LossWeights)}
        w = {k: d.pop(k) for k in list(d) if k in wnames}
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        if "weights" in d and isinstance(d["weights"], dict):
            w = {**d.pop("weights"), **w}
        return cls(**d, weights=LossWeights(**w)) if w else cls(**d)

    def with_all_lr(self, lr: float) -> TrainConfig:
        return replace(self, lr_position_init=lr, lr_position_final=lr, lr_log_scale=lr,
                       lr_rotation=lr, lr_opacity=lr, lr_intensity=lr)


# ---------------------------------------------------------------- optimizer


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_cloud(cls, cloud: GaussianCloud) -> AdamState:
        params = cloud.params()
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()})

    def __len__(self) -> int:
        return len(self.m["positions"])

    def update(self, cloud: GaussianCloud, grads: GradientBuffer, lrs: dict[str, float]) -> None:
        self.step += 1
        bc1 = 1.0 - self.beta1 ** self.step
        bc2 = 1.0 - self.beta2 ** self.step
        for name, p in cloud.params().items():
            g = getattr(grads, name)
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            lr = lrs[name]
            if lr:
                p -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def select(self, keep) -> None:
        for d in (self.m, self.v):
            for k in d:
                d[k] = d[k][keep]

    def extend(self, n: int) -> None:
        for d in (self.m, self.v):
            for k in d:
                d[k] = np.concatenate([d[k], np.zeros((n,) + d[k].shape[1:])])


def learning_rates(config: TrainConfig, iteration: int, scene_extent: float) -> dict[str, float]:
    """Per-group rates; the position rate decays log-linearly over the run."""
    f = min(max((iteration - 1) / max(config.iterations - 1, 1), 0.0), 1.0)
    if config.lr_position_init > 0 and config.lr_position_final > 0:
        pos = np.exp((1 - f) * np.log(config.lr_position_init) + f * np.log(config.lr_position_final))
    else:
        pos = (1 - f) * config.lr_position_init + f * config.lr_position_final
    return {
        "positions": float(pos) * scene_extent,
        "log_scales": config.lr_log_scale,
        "rotations": config.lr_rotation,
        "opacity_logits": config.lr_opacity,
        "intensities": config.lr_intensity,
    }


# ---------------------------------------------------------------- view split


def split_views(n_views: int, train_fraction: float, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic train/test split with even angular coverage.

    A fraction of exactly one half interleaves (even views train, odd views
    test); other fractions take ``round(fraction * n)`` evenly strided views
    starting at view 0. The split does not depend on ``seed``.
    """
    if not 0.0 < train_fraction <= 1.0:
        raise ValueError(f"train_fraction must lie in (0, 1], got {train_fraction}")
    all_idx = np.arange(n_views)
    if train_fraction == 1.0:
        return all_idx, np.zeros(0, dtype=int)
    if train_fraction == 0.5:
        train = all_idx[::2]
    else:
        k = int(round(train_fraction * n_views))
        if k < 1:
            raise ValueError(f"train_fraction {train_fraction} leaves no training views of {n_views}")
        train = np.unique(np.floor(np.arange(k) * n_views / k).astype(int))
    test = np.setdiff1d(all_idx, train)
    return train, test


# ---------------------------------------------------------------- density control


@dataclass
class DensifyStats:
    grad_norm_sum: np.ndarray
    hits: np.ndarray
    position_grad_sum: np.ndarray

    @classmethod
    def zeros(cls, n: int) -> DensifyStats:
        return cls(np.zeros(n), np.zeros(n), np.zeros((n, 3)))

    def add(self, grads: GradientBuffer) -> None:
        vis = grads.visible
        self.grad_norm_sum[vis] += grads.mean2d_grad_norm[vis]
        self.hits[vis] += 1
        self.position_grad_sum[vis] += grads.positions[vis]

    def mean_grad(self) -> np.ndarray:
        return np.divide(self.grad_norm_sum, self.hits, out=np.zeros_like(self.grad_norm_sum),
                         where=self.hits > 0)


def density_control(cloud: GaussianCloud, stats: DensifyStats, adam: AdamState,
                    config: TrainConfig, iteration: int,
                    rng: np.random.Generator) -> tuple[GaussianCloud, AdamState, DensifyStats]:
    """Scheduled clone / split / prune and opacity reset.

    Returns the (possibly new) cloud with Adam moments and statistics resized
    to match. Between scheduled steps everything is returned unchanged.
    """
    densify_now = (config.densify_from < iteration <= config.densify_until
                   and iteration % config.densify_interval == 0)
    if densify_now:
        cloud, adam = _densify_and_prune(cloud, stats, adam, config, rng)
        stats = DensifyStats.zeros(len(cloud))
    if iteration % config.opacity_reset_interval == 0 and iteration <= config.densify_until:
        cap = logit(config.opacity_reset_value)
        cloud.opacity_logits[:] = np.minimum(cloud.opacity_logits, cap)
        adam.m["opacity_logits"][:] = 0.0
        adam.v["opacity_logits"][:] = 0.0
    return cloud, adam, stats


def _densify_and_prune(cloud, stats, adam, config, rng):
    n = len(cloud)
    selected = stats.mean_grad() > config.densify_grad_threshold
    if config.max_gaussians is not None:
        room = max(config.max_gaussians - n, 0)
        if selected.sum() > room:
            # keep the strongest candidates; ties resolved by index
            order = np.lexsort((np.arange(n), -stats.mean_grad()))
            chosen = np.zeros(n, bool)
            chosen[order[:room]] = True
            selected &= chosen
    max_scale = cloud.scales.max(axis=1)
    small = max_scale <= config.clone_scale_fraction * cloud.scene_extent
    clone_idx = np.flatnonzero(selected & small)
    split_idx = np.flatnonzero(selected & ~small)

    clones = cloud.select(clone_idx)
    if len(clone_idx):
        g = stats.position_grad_sum[clone_idx]
        norm = np.linalg.norm(g, axis=1, keepdims=True)
        direction = np.divide(g, norm, out=np.zeros_like(g), where=norm > 0)
        step = rng.random(len(clone_idx))[:, None] * max_scale[clone_idx, None]
        clones.positions -= direction * step

    children = cloud.select(np.repeat(split_idx, 2))
    if len(split_idx):
        rot = quaternion_to_matrix(children.rotations)
        local = rng.standard_normal((len(children), 3)) * children.scales
        children.positions += np.einsum("nij,nj->ni", rot, local)
        children.log_scales -= np.log(config.split_scale_factor)

    keep = np.ones(n, bool)
    keep[split_idx] = False
    new = cloud.select(keep).append(clones).append(children)
    adam.select(keep)
    adam.extend(len(clones) + len(children))

    alive = new.opacities >= config.prune_opacity_threshold
    if not alive.any():
        alive[int(np.argmax(new.opacity_logits))] = True
    if not alive.all():
        new = new.select(alive)
        adam.select(alive)
    return new, adam


# ---------------------------------------------------------------- training loop


@dataclass
class TrainResult:
    cloud: GaussianCloud
    log: list[dict]
    train_indices: np.ndarray
    test_indices: np.ndarray
    config: TrainConfig
    history: dict[int, GaussianCloud] = field(default_factory=dict)


def initial_cloud(dataset: Dataset, config: TrainConfig) -> GaussianCloud:
    ell = Ellipsoid.default_for_fov(dataset.geometry.fov_side)
    return init_ellipsoid_cloud(ell, config.n_init, config.seed, config.init_intensity,
                                config.init_opacity)


class ViewSampler:
    """Endless epoch-shuffled stream of training view indices."""

    def __init__(self, indices, rng: np.random.Generator):
        self.indices = np.asarray(indices)
        self.rng = rng
        self.queue: list[int] = []

    def __next__(self) -> int:
        if not self.queue:
            self.queue = list(self.rng.permutation(self.indices)[::-1])
        return int(self.queue.pop())


def train(data, config: TrainConfig = TrainConfig(), out_dir=None,
          init: GaussianCloud | None = None, keep_history: tuple[int, ...] = ()) -> TrainResult:
    """Optimize a cloud against the training split of ``data``.

    ``data`` is a :class:`Dataset` or a manifest path. With ``out_dir`` the
    final cloud (``model.ply``), the log (``train_log.csv``) and periodic
    checkpoints (``checkpoints/iter_XXXXXX.ply``) are written there.
    ``keep_history`` lists iterations whose cloud snapshot is returned in
    ``TrainResult.history``.
    """
    ds = as_dataset(data)
    train_idx, test_idx = split_views(len(ds), config.train_fraction, config.seed)
    if len(train_idx) == 0:
        raise ValueError("no training views")
    cloud = initial_cloud(ds, config) if init is None else init.copy()
    rng = np.random.default_rng(config.seed)
    sampler = ViewSampler(train_idx, rng)
    adam = AdamState.for_cloud(cloud)
    stats = DensifyStats.zeros(len(cloud))
    geom = ds.geometry
    w, h = geom.image_width, geom.image_height
    rows: list[dict] = []
    history: dict[int, GaussianCloud] = {}
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
    log.info("training on %d views (%d held out), %d Gaussians", len(train_idx), len(test_idx),
             len(cloud))

    for it in range(1, config.iterations + 1):
        t0 = time.perf_counter()
        k = next(sampler)
        res = rasterize(cloud, ds.poses[k], w, h, config.background)
        rep = total_loss(res, ds.images[k], config.weights)
        if not np.isfinite(rep.total):
            raise FloatingPointError(f"non-finite loss at iteration {it}")
        grads = render_backward(cloud, ds.poses[k], w, h, config.background,
                                rep.d_pixels, rep.d_opacity, ctx=res)
        if it <= config.densify_until:
            stats.add(grads)
        lrs = learning_rates(config, it, cloud.scene_extent)
        adam.update(cloud, grads, lrs)
        if lrs["rotations"]:
            cloud.normalize_rotations()
        np.maximum(cloud.intensities, 0.0, out=cloud.intensities)
        if it < config.iterations:
            # nothing would optimize the new Gaussians after the last step
            cloud, adam, stats = density_control(cloud, stats, adam, config, it, rng)
        if len(cloud) == 0:
            raise RuntimeError(f"cloud became empty at iteration {it}")
        rows.append({"iteration": it, "l1": rep.l1, "dssim": rep.dssim, "tv": rep.tv,
                     "beta": rep.beta, "total": rep.total, "n_gaussians": len(cloud),
                     "ms_per_iter": round(1000 * (time.perf_counter() - t0), 3)})
        if it in keep_history:
            history[it] = cloud.copy()
        if out_dir is not None and config.checkpoint_interval and it % config.checkpoint_interval == 0:
            (out_dir / "checkpoints").mkdir(exist_ok=True)
            write_ply(cloud, out_dir / "checkpoints" / f"iter_{it:06d}.ply")
        if it % 500 == 0 or it == config.iterations:
            log.info("iter %d  loss %.5f  l1 %.5f  n=%d", it, rep.total, rep.l1, len(cloud))

    if out_dir is not None:
        write_ply(cloud, out_dir / "model.ply")
        write_csv(rows, out_dir / "train_log.csv", LOG_COLUMNS)
    return TrainResult(cloud, rows, train_idx, test_idx, config, history)
