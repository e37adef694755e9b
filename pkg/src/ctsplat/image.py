from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class ProjectionImage:
    """Single-channel projection in [0, 1], stored as an (height, width) array.

    ``opacity`` is the accumulated opacity map of a rendered view; ground-truth
    radiographs leave it as ``None``.
    """

    pixels: np.ndarray
    view_angle_deg: float = 0.0
    opacity: np.ndarray | None = None

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        if self.pixels.ndim != 2:
            raise ValueError(f"pixels must be 2-D, got shape {self.pixels.shape}")
        if self.pixels.size and (self.pixels.min() < 0.0 or self.pixels.max() > 1.0):
            raise ValueError("pixel values must lie in [0, 1]")
        if self.opacity is not None:
            self.opacity = np.asarray(self.opacity, dtype=np.float64)
            if self.opacity.shape != self.pixels.shape:
                raise ValueError("opacity map must match the image shape")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


def as_array(img) -> np.ndarray:
    """Pixels of a ProjectionImage / render result, or the array itself."""
    return np.asarray(getattr(img, "pixels", img), dtype=np.float64)
