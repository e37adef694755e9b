"""Voxel phantoms and their digitally reconstructed radiographs (DRRs).

A DRR pixel is the additive line integral of attenuation along the ray from
the source (camera center) through that pixel, sampled with a fixed step and
trilinear interpolation between voxel centers (zero outside the grid). All
views of one scan are divided by the same constant, the maximum line integral
over the scan's orbit, so relative brightness survives across angles.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numba
import numpy as np

from .geometry import CameraPose, ScanGeometry, orbit_poses, pixel_rays
from .image import ProjectionImage


@dataclass
class VoxelPhantom:
    """Non-negative attenuation grid; ``values[ix, iy, iz]`` at voxel centers."""

    values: np.ndarray
    spacing: tuple[float, float, float]
    origin: tuple[float, float, float]
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype=np.float64)
        if self.values.ndim != 3:
            raise ValueError("phantom values must be a 3-D array")
        if np.any(self.values < 0):
            raise ValueError("attenuation values must be non-negative")
        if not all(s > 0 for s in self.spacing):
            raise ValueError("voxel spacing must be positive")
        self.spacing = tuple(float(s) for s in self.spacing)
        self.origin = tuple(float(o) for o in self.origin)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.values.shape)

    @property
    def n_voxels(self) -> int:
        return int(self.values.size)

    @classmethod
    def centered(cls, values: np.ndarray, fov_side: float, meta: dict | None = None) -> VoxelPhantom:
        """Grid filling the cube ``[-fov/2, fov/2]^3`` around the isocenter."""
        dims = np.asarray(values).shape
        spacing = tuple(fov_side / d for d in dims)
        origin = tuple(-fov_side / 2 + s / 2 for s in spacing)
        return cls(values, spacing, origin, meta or {})

    def voxel_centers(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        axes = [o + s * np.arange(d) for o, s, d in zip(self.origin, self.spacing, self.dims)]
        return np.meshgrid(*axes, indexing="ij")


@dataclass(frozen=True)
class EllipsoidComponent:
    """Additive ellipsoid in normalized coordinates (half-FOV = 1)."""

    center: tuple[float, float, float]
    semi_axes: tuple[float, float, float]
    value: float
    angle_deg: float = 0.0  # rotation about z

    def mask(self, x, y, z):
        t = np.deg2rad(self.angle_deg)
        dx, dy, dz = x - self.center[0], y - self.center[1], z - self.center[2]
        xr = np.cos(t) * dx + np.sin(t) * dy
        yr = -np.sin(t) * dx + np.cos(t) * dy
        a, b, c = self.semi_axes
        return (xr / a) ** 2 + (yr / b) ** 2 + (dz / c) ** 2 <= 1.0


SKULL = EllipsoidComponent((0.0, 0.0, 0.0), (0.70, 0.78, 0.88), 1.0)
BRAIN = EllipsoidComponent((0.0, 0.0, 0.0), (0.64, 0.72, 0.82), -0.8)


def head_components(seed: int) -> list[EllipsoidComponent]:
    """Skull shell, brain, and 3-5 seeded inclusions inside the brain."""
    rng = np.random.default_rng(seed)
    comps = [SKULL, BRAIN]
    for _ in range(int(rng.integers(3, 6))):
        d = rng.standard_normal(3)
        d /= np.linalg.norm(d)
        center = d * rng.uniform(0.0, 0.45) * np.array(BRAIN.semi_axes)
        axes = rng.uniform(0.08, 0.22, size=3)
        value = float(rng.uniform(-0.12, 0.3))
        comps.append(EllipsoidComponent(tuple(center), tuple(axes), value,
                                        float(rng.uniform(0, 180))))
    return comps


def rasterize_components(components, dims, fov_side: float) -> np.ndarray:
    """Sum of component values at voxel centers, clipped to [0, 1]."""
    half = fov_side / 2
    axes = [(-half + (np.arange(d) + 0.5) * fov_side / d) / half for d in dims]
    x, y, z = np.meshgrid(*axes, indexing="ij")
    vol = np.zeros(dims)
    for c in components:
        vol[c.mask(x, y, z)] += c.value
    return np.clip(vol, 0.0, 1.0)


def make_head_phantom(dims=(128, 128, 128), seed: int = 0, fov_side: float = 256.0) -> VoxelPhantom:
    """Deterministic 3-D Shepp-Logan-style head: skull, brain, inclusions."""
    dims = tuple(int(d) for d in dims)
    if len(dims) != 3 or min(dims) < 8:
        raise ValueError(f"phantom needs at least 8 voxels per axis, got {dims}")
    vol = rasterize_components(head_components(seed), dims, fov_side)
    return VoxelPhantom.centered(vol, fov_side, {"kind": "head", "seed": seed})


@numba.njit(cache=True, inline="always")
def _sample(values, gx, gy, gz):
    nx, ny, nz = values.shape
    ix = math.floor(gx)
    iy = math.floor(gy)
    iz = math.floor(gz)
    fx = gx - ix
    fy = gy - iy
    fz = gz - iz
    acc = 0.0
    for dx in range(2):
        x = ix + dx
        if x < 0 or x >= nx:
            continue
        wx = fx if dx else 1.0 - fx
        for dy in range(2):
            y = iy + dy
            if y < 0 or y >= ny:
                continue
            wy = fy if dy else 1.0 - fy
            for dz in range(2):
                z = iz + dz
                if z < 0 or z >= nz:
                    continue
                wz = fz if dz else 1.0 - fz
                acc += wx * wy * wz * values[x, y, z]
    return acc


@numba.njit(cache=True, parallel=True)
def _line_integrals(values, origin, spacing, source, dirs, step, out):
    nx, ny, nz = values.shape
    shape = (nx, ny, nz)
    h, w = out.shape
    for r in numba.prange(h):
        for c in range(w):
            t0 = 0.0
            t1 = 1e300
            hit = True
            for a in range(3):
                # trilinear support extends one voxel past the outer centers
                lo = origin[a] - spacing[a]
                hi = origin[a] + shape[a] * spacing[a]
                d = dirs[r, c, a]
                if abs(d) < 1e-15:
                    if source[a] <= lo or source[a] >= hi:
                        hit = False
                    continue
                ta = (lo - source[a]) / d
                tb = (hi - source[a]) / d
                if ta > tb:
                    ta, tb = tb, ta
                t0 = max(t0, ta)
                t1 = min(t1, tb)
            if not hit or t1 <= t0:
                out[r, c] = 0.0
                continue
            n = int(math.ceil((t1 - t0) / step))
            dt = (t1 - t0) / n
            acc = 0.0
            for k in range(n):
                t = t0 + (k + 0.5) * dt
                gx = (source[0] + t * dirs[r, c, 0] - origin[0]) / spacing[0]
                gy = (source[1] + t * dirs[r, c, 1] - origin[1]) / spacing[1]
                gz = (source[2] + t * dirs[r, c, 2] - origin[2]) / spacing[2]
                acc += _sample(values, gx, gy, gz)
            out[r, c] = acc * dt


def line_integrals(ph: VoxelPhantom, pose: CameraPose, width: int, height: int,
                   step: float | None = None) -> np.ndarray:
    """Unnormalized attenuation line integrals, shape (height, width)."""
    if step is None:
        step = 0.5 * min(ph.spacing)
    dirs = np.ascontiguousarray(pixel_rays(pose, width, height))
    if not np.all(np.isfinite(dirs)) or np.any(np.linalg.norm(dirs, axis=-1) == 0):
        raise RuntimeError("degenerate ray direction")
    out = np.empty((height, width))
    _line_integrals(ph.values, np.array(ph.origin), np.array(ph.spacing),
                    np.asarray(pose.camera_center, dtype=np.float64), dirs, float(step), out)
    return out


def normalization_constant(ph: VoxelPhantom, geom: ScanGeometry, step: float | None = None) -> float:
    """Maximum line integral over the scan orbit (1.0 for an empty phantom)."""
    peak = max(line_integrals(ph, p, geom.image_width, geom.image_height, step).max()
               for p in orbit_poses(geom))
    return float(peak) if peak > 0 else 1.0


def drr_project(ph: VoxelPhantom, pose: CameraPose, geom: ScanGeometry,
                normalization: float | None = None, step: float | None = None) -> ProjectionImage:
    """Normalized DRR of one view.

    Pass the scan's ``normalization`` when projecting many views; leaving it
    out recomputes it over the full orbit.
    """
    if normalization is None:
        normalization = normalization_constant(ph, geom, step)
    raw = line_integrals(ph, pose, geom.image_width, geom.image_height, step)
    return ProjectionImage(np.clip(raw / normalization, 0.0, 1.0), pose.view_angle_deg)


def project_orbit(ph: VoxelPhantom, geom: ScanGeometry,
                  step: float | None = None) -> tuple[list[ProjectionImage], float]:
    """All normalized views of the orbit plus the normalization constant used."""
    poses = orbit_poses(geom)
    raws = [line_integrals(ph, p, geom.image_width, geom.image_height, step) for p in poses]
    peak = max(r.max() for r in raws)
    norm = float(peak) if peak > 0 else 1.0
    images = [ProjectionImage(np.clip(r / norm, 0.0, 1.0), p.view_angle_deg)
              for r, p in zip(raws, poses)]
    return images, norm


def generate_dataset(ph: VoxelPhantom, geom: ScanGeometry, out_dir, float_sidecar: bool = False):
    """Write every orbit view as a 16-bit PNG plus ``manifest.json``.

    Returns the written :class:`~ctsplat.formats.SceneManifest`.
    """
    from .formats import SceneManifest, ViewEntry, write_image, write_manifest

    out_dir = Path(out_dir)
    geom.validate()
    images, norm = project_orbit(ph, geom)
    views = []
    try:
        (out_dir / "views").mkdir(parents=True, exist_ok=True)
        for k, img in enumerate(images):
            rel = f"views/view_{k:04d}.png"
            write_image(img, out_dir / rel, float_sidecar=float_sidecar)
            views.append(ViewEntry(float(img.view_angle_deg), rel))
    except OSError as exc:
        raise OSError(f"failed writing dataset under {out_dir}: {exc}") from exc
    manifest = SceneManifest(
        geometry=geom,
        views=views,
        normalization=norm,
        extra={"phantom": {"dims": list(ph.dims), "spacing": list(ph.spacing),
                           "origin": list(ph.origin), **ph.meta}},
    )
    write_manifest(manifest, out_dir / "manifest.json")
    manifest.root = out_dir
    return manifest
