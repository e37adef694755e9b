"""Circular CT orbit as a set of pinhole cameras.

Frame convention (frozen; every test pins it):

* World: origin at the isocenter, ``+z`` is the patient superior axis and the
  rotation axis of the source. The source of view ``k`` sits at
  ``R * (cos t_k, sin t_k, 0)`` with ``t_k = angular_start + k * step``.
* Camera: right-handed, ``+z_cam`` is the viewing direction (toward the
  isocenter), ``+x_cam`` points along increasing image column ``u`` and
  ``+y_cam`` along increasing image row ``v``. World ``+z`` therefore maps to
  *decreasing* ``v`` (up in the image).
* Pixel ``(row v, col u)`` is sampled at the integer coordinate ``(u, v)``; the
  principal point is ``(W/2, H/2)``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

NEAR_PLANE_FRACTION = 1e-4


@dataclass(frozen=True)
class ScanGeometry:
    source_to_isocenter: float = 1000.0
    source_to_detector: float = 1500.0
    detector_width: float = 400.0
    detector_height: float = 400.0
    image_width: int = 128
    image_height: int = 128
    n_views: int = 360
    angular_start_deg: float = 0.0
    angular_step_deg: float = 1.0
    fov_side: float = 256.0

    def validate(self) -> None:
        for name in ("source_to_isocenter", "source_to_detector", "detector_width",
                     "detector_height", "fov_side"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.source_to_detector <= self.source_to_isocenter:
            raise ValueError("source_to_detector must exceed source_to_isocenter")
        if self.image_width < 1 or self.image_height < 1:
            raise ValueError("image dimensions must be positive")
        if self.n_views < 1:
            raise ValueError("n_views must be at least 1")
        if self.n_views * abs(self.angular_step_deg) > 360 + 1e-9:
            raise ValueError("orbit covers more than 360 degrees")
        # the FOV must sit strictly in front of every source position
        if self.fov_side * np.sqrt(3) / 2 >= self.source_to_isocenter:
            raise ValueError("field of view reaches the source orbit")

    @property
    def angles_deg(self) -> np.ndarray:
        return self.angular_start_deg + self.angular_step_deg * np.arange(self.n_views)

    @property
    def focal_x(self) -> float:
        return self.source_to_detector * self.image_width / self.detector_width

    @property
    def focal_y(self) -> float:
        return self.source_to_detector * self.image_height / self.detector_height

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> ScanGeometry:
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass(frozen=True)
class CameraPose:
    rotation: np.ndarray       # world -> camera
    camera_center: np.ndarray  # world
    fx: float
    fy: float
    cx: float
    cy: float
    view_angle_deg: float = 0.0
    width: int = 0
    height: int = 0

    @property
    def near(self) -> float:
        return NEAR_PLANE_FRACTION * float(np.linalg.norm(self.camera_center))

    def world_to_camera(self, x: np.ndarray) -> np.ndarray:
        """Camera-space coordinates of (..., 3) world points."""
        return (np.asarray(x, dtype=np.float64) - self.camera_center) @ self.rotation.T

    @property
    def principal_axis(self) -> np.ndarray:
        return self.rotation[2].copy()


def look_at(center: np.ndarray, target: np.ndarray, up: np.ndarray) -> np.ndarray:
    """World->camera rotation for a camera at ``center`` looking at ``target``."""
    forward = np.asarray(target, float) - np.asarray(center, float)
    forward /= np.linalg.norm(forward)
    down = -np.asarray(up, float)
    down = down - forward * (down @ forward)
    down /= np.linalg.norm(down)
    right = np.cross(down, forward)
    return np.stack([right, down, forward])


def pose_at_angle(geom: ScanGeometry, angle_deg: float) -> CameraPose:
    t = np.deg2rad(angle_deg)
    r = geom.source_to_isocenter
    center = np.array([r * np.cos(t), r * np.sin(t), 0.0])
    rot = look_at(center, np.zeros(3), np.array([0.0, 0.0, 1.0]))
    return CameraPose(rot, center, geom.focal_x, geom.focal_y,
                      geom.image_width / 2.0, geom.image_height / 2.0,
                      float(angle_deg), geom.image_width, geom.image_height)


def orbit_poses(geom: ScanGeometry) -> list[CameraPose]:
    """One pinhole camera per view of the circular orbit."""
    geom.validate()
    return [pose_at_angle(geom, a) for a in geom.angles_deg]


def project_point(pose: CameraPose, x) -> tuple[float, float, float, bool]:
    """Project a world point; returns ``(u, v, depth, projectable)``.

    Points at or behind the near plane come back with ``projectable=False``
    and NaN pixel coordinates.
    """
    xc = pose.world_to_camera(np.asarray(x, dtype=np.float64))
    depth = float(xc[2])
    if depth <= pose.near:
        return float("nan"), float("nan"), depth, False
    u = pose.fx * xc[0] / depth + pose.cx
    v = pose.fy * xc[1] / depth + pose.cy
    return float(u), float(v), depth, True


def projection_jacobian(pose: CameraPose, xc) -> np.ndarray:
    """d(u, v)/d(camera-space point), a 2x3 matrix."""
    x, y, z = np.asarray(xc, dtype=np.float64)
    if z <= pose.near:
        raise ValueError(f"point depth {z} is not beyond the near plane {pose.near}")
    return np.array([
        [pose.fx / z, 0.0, -pose.fx * x / z**2],
        [0.0, pose.fy / z, -pose.fy * y / z**2],
    ])


def pixel_rays(pose: CameraPose, width: int, height: int) -> np.ndarray:
    """Unit world-space ray directions through every pixel, shape (H, W, 3)."""
    u, v = np.meshgrid(np.arange(width, dtype=np.float64),
                       np.arange(height, dtype=np.float64))
    cam = np.stack([(u - pose.cx) / pose.fx, (v - pose.cy) / pose.fy, np.ones_like(u)], -1)
    d = cam @ pose.rotation
    return d / np.linalg.norm(d, axis=-1, keepdims=True)
