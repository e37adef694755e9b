"""Optimizable Gaussian scene and its ellipsoid initialization.

The cloud is stored as a struct of arrays, one row per Gaussian:

    positions       (N, 3)  world units, origin at the isocenter
    log_scales      (N, 3)  log of the per-axis standard deviation
    rotations       (N, 4)  quaternion (w, x, y, z), kept unit-norm
    opacity_logits  (N,)    opacity = sigmoid(logit)
    intensities     (N,)    view-independent grayscale emission, >= 0
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

PARAM_GROUPS = ("positions", "log_scales", "rotations", "opacity_logits", "intensities")

MIN_SCALE = 1e-4


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p / (1.0 - p))


@dataclass(frozen=True)
class Ellipsoid:
    center: tuple[float, float, float]
    semi_axes: tuple[float, float, float]

    def __post_init__(self):
        if len(self.center) != 3 or len(self.semi_axes) != 3:
            raise ValueError("ellipsoid center and semi_axes must be 3-vectors")
        if not all(a > 0 for a in self.semi_axes):
            raise ValueError(f"ellipsoid semi-axes must be positive, got {self.semi_axes}")

    @classmethod
    def default_for_fov(cls, fov_side: float) -> Ellipsoid:
        """Brain-sized prior centered in a cubic field of view."""
        return cls((0.0, 0.0, 0.0), (0.4 * fov_side, 0.4 * fov_side, 0.5 * fov_side))


@dataclass
class Gaussian:
    position: np.ndarray
    log_scale: np.ndarray
    rotation: np.ndarray
    opacity_logit: float
    intensity: float

    @property
    def opacity(self) -> float:
        return float(sigmoid(self.opacity_logit))


@dataclass
class GaussianCloud:
    positions: np.ndarray
    log_scales: np.ndarray
    rotations: np.ndarray
    opacity_logits: np.ndarray
    intensities: np.ndarray
    scene_extent: float = 1.0
    # free-form provenance (e.g. init seed); not serialized to PLY
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.positions)
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(n, 3)
        self.log_scales = np.asarray(self.log_scales, dtype=np.float64).reshape(n, 3)
        self.rotations = np.asarray(self.rotations, dtype=np.float64).reshape(n, 4)
        self.opacity_logits = np.asarray(self.opacity_logits, dtype=np.float64).reshape(n)
        self.intensities = np.asarray(self.intensities, dtype=np.float64).reshape(n)
        if not self.scene_extent > 0:
            raise ValueError(f"scene_extent must be positive, got {self.scene_extent}")

    def __len__(self) -> int:
        return len(self.positions)

    @classmethod
    def empty(cls, scene_extent: float = 1.0) -> GaussianCloud:
        return cls(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 4)),
                   np.zeros(0), np.zeros(0), scene_extent)

    @classmethod
    def from_gaussians(cls, gaussians, scene_extent: float = 1.0) -> GaussianCloud:
        gaussians = list(gaussians)
        if not gaussians:
            return cls.empty(scene_extent)
        return cls(
            np.array([g.position for g in gaussians]),
            np.array([g.log_scale for g in gaussians]),
            np.array([g.rotation for g in gaussians]),
            np.array([g.opacity_logit for g in gaussians]),
            np.array([g.intensity for g in gaussians]),
            scene_extent,
        )

    def __getitem__(self, i: int) -> Gaussian:
        return Gaussian(self.positions[i].copy(), self.log_scales[i].copy(),
                        self.rotations[i].copy(), float(self.opacity_logits[i]),
                        float(self.intensities[i]))

    @property
    def opacities(self) -> np.ndarray:
        return sigmoid(self.opacity_logits)

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    def params(self) -> dict[str, np.ndarray]:
        """The optimizable arrays by group name (views, not copies)."""
        return {name: getattr(self, name) for name in PARAM_GROUPS}

    def copy(self) -> GaussianCloud:
        return GaussianCloud(*(getattr(self, n).copy() for n in PARAM_GROUPS),
                             scene_extent=self.scene_extent, meta=dict(self.meta))

    def select(self, mask_or_index) -> GaussianCloud:
        return GaussianCloud(*(getattr(self, n)[mask_or_index] for n in PARAM_GROUPS),
                             scene_extent=self.scene_extent, meta=dict(self.meta))

    def append(self, other: GaussianCloud) -> GaussianCloud:
        return GaussianCloud(
            *(np.concatenate([getattr(self, n), getattr(other, n)]) for n in PARAM_GROUPS),
            scene_extent=self.scene_extent, meta=dict(self.meta))

    def normalize_rotations(self) -> None:
        norms = np.linalg.norm(self.rotations, axis=1, keepdims=True)
        self.rotations /= norms

    def equals(self, other: GaussianCloud) -> bool:
        """Bit-exact comparison of every parameter array."""
        return len(self) == len(other) and all(
            np.array_equal(getattr(self, n), getattr(other, n)) for n in PARAM_GROUPS)


def quaternion_to_matrix(q: np.ndarray) -> np.ndarray:
    """Rotation matrices for (..., 4) quaternions (w, x, y, z); normalizes first."""
    q = np.asarray(q, dtype=np.float64)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = np.moveaxis(q, -1, 0)
    return np.stack([
        np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], -1),
        np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], -1),
        np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], -1),
    ], -2)


def covariance_world(g: Gaussian) -> np.ndarray:
    """World-space covariance R diag(s^2) R^T of a single Gaussian."""
    return covariances(np.asarray(g.log_scale)[None], np.asarray(g.rotation)[None])[0]


def covariances(log_scales: np.ndarray, rotations: np.ndarray) -> np.ndarray:
    rot = quaternion_to_matrix(rotations)
    m = rot * np.exp(log_scales)[:, None, :]
    return m @ np.swapaxes(m, -1, -2)


def sample_ellipsoid(ell: Ellipsoid, n: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform samples in the solid ellipsoid via scaled unit-ball sampling."""
    direction = rng.standard_normal((n, 3))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    radius = rng.random(n) ** (1.0 / 3.0)
    unit = direction * radius[:, None]
    return np.asarray(ell.center) + unit * np.asarray(ell.semi_axes)


def nearest_neighbor_scale(points: np.ndarray, k: int = 3, upper: float = np.inf) -> np.ndarray:
    """Mean distance to the k nearest neighbours, clamped to [MIN_SCALE, upper]."""
    n = len(points)
    if n < 2:
        # no neighbours: fall back to a tenth of the allowed range
        fallback = 0.1 * upper if np.isfinite(upper) else 1.0
        return np.full(n, max(fallback, MIN_SCALE))
    k = min(k, n - 1)
    dist, _ = cKDTree(points).query(points, k=k + 1)
    mean = dist[:, 1:].mean(axis=1)
    return np.clip(mean, MIN_SCALE, upper)


def init_ellipsoid_cloud(ell: Ellipsoid, n: int = 10_000, seed: int = 0,
                         base_intensity: float = 0.5,
                         base_opacity: float = 0.1) -> GaussianCloud:
    """Seed ``n`` isotropic Gaussians uniformly inside ``ell``.

    Initial per-Gaussian scale is the mean distance to its three nearest
    neighbours. All values are rounded to float32 so the initial cloud
    survives a PLY round trip unchanged.
    """
    if n < 1:
        raise ValueError(f"need at least one Gaussian, got n={n}")
    if not 0.0 < base_opacity < 1.0:
        raise ValueError(f"base_opacity must lie in (0, 1), got {base_opacity}")
    if base_intensity < 0:
        raise ValueError("base_intensity must be non-negative")
    rng = np.random.default_rng(seed)
    extent = float(max(ell.semi_axes))
    pos = sample_ellipsoid(ell, n, rng)
    scale = nearest_neighbor_scale(pos, k=3, upper=extent)

    def f32(a):
        return np.asarray(a, dtype=np.float32).astype(np.float64)

    rot = np.zeros((n, 4))
    rot[:, 0] = 1.0
    return GaussianCloud(
        positions=f32(pos),
        log_scales=f32(np.repeat(np.log(scale)[:, None], 3, axis=1)),
        rotations=rot,
        opacity_logits=f32(np.full(n, logit(base_opacity))),
        intensities=f32(np.full(n, base_intensity)),
        scene_extent=extent,
        meta={"seed": seed},
    )
