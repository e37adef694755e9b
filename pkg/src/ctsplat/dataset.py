from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .formats import SceneManifest, ViewEntry, read_image, read_manifest
from .geometry import CameraPose, ScanGeometry, pose_at_angle


@dataclass
class Dataset:
    """Projection views of one scan with their analytic cameras."""

    manifest: SceneManifest
    images: np.ndarray  # (n_views, H, W) in [0, 1]
    poses: list[CameraPose]

    @property
    def geometry(self) -> ScanGeometry:
        return self.manifest.geometry

    @property
    def angles_deg(self) -> np.ndarray:
        return self.manifest.angles_deg

    def __len__(self) -> int:
        return len(self.images)

    @classmethod
    def load(cls, manifest_path, use_sidecar: bool = False) -> Dataset:
        m = read_manifest(manifest_path)
        images = np.stack([read_image(m.image_path(k), v.angle_deg, use_sidecar).pixels
                           for k, v in enumerate(m.views)])
        return cls(m, images, [pose_at_angle(m.geometry, v.angle_deg) for v in m.views])

    @classmethod
    def from_images(cls, geom: ScanGeometry, images, angles_deg=None) -> Dataset:
        """In-memory dataset, e.g. straight from :func:`ctsplat.phantom.project_orbit`."""
        arr = np.stack([np.asarray(getattr(im, "pixels", im), dtype=np.float64) for im in images])
        if angles_deg is None:
            angles_deg = [getattr(im, "view_angle_deg", a) for im, a in zip(images, geom.angles_deg)]
        views = [ViewEntry(float(a), f"<memory:{k}>") for k, a in enumerate(angles_deg)]
        m = SceneManifest(geom, views)
        return cls(m, arr, [pose_at_angle(geom, a) for a in angles_deg])


def as_dataset(data) -> Dataset:
    if isinstance(data, Dataset):
        return data
    if isinstance(data, SceneManifest):
        if data.root is None:
            raise ValueError("manifest has no root directory to resolve image paths")
        return Dataset.load(Path(data.root) / "manifest.json")
    return Dataset.load(data)
