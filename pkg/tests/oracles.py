"""Independent reference implementations used by the tests.

The brute-force renderer below shares no code with ``ctsplat.rasterizer``:
it builds covariances with scipy's rotation class, projects with the
closed-form pinhole Jacobian, sorts every splat globally by (depth, index)
and composites each pixel in plain numpy.
"""

from __future__ import annotations

import numpy as np
from scipy.spatial.transform import Rotation

from ctsplat.geometry import ScanGeometry, pose_at_angle
from ctsplat.scene import PARAM_GROUPS, GaussianCloud

LOWPASS = 0.3
ALPHA_MAX = 0.99
ALPHA_MIN = 1.0 / 255.0
T_MIN = 1e-4
CUTOFF = 9.0  # squared Mahalanobis radius (3 sigma)


def _splats(cloud, pose):
    """Per-Gaussian (depth, mean2d, conic, alpha, intensity) for splats in front of the camera."""
    out = []
    for i in range(len(cloud)):
        w, x, y, z = cloud.rotations[i]
        R = Rotation.from_quat([x, y, z, w]).as_matrix()  # normalizes
        S = np.diag(np.exp(2 * cloud.log_scales[i]))
        cov3 = R @ S @ R.T
        xc = pose.rotation @ (cloud.positions[i] - pose.camera_center)
        if xc[2] <= pose.near:
            continue
        J = np.array([[pose.fx / xc[2], 0, -pose.fx * xc[0] / xc[2] ** 2],
                      [0, pose.fy / xc[2], -pose.fy * xc[1] / xc[2] ** 2]])
        T = J @ pose.rotation
        cov2 = T @ cov3 @ T.T + LOWPASS * np.eye(2)
        mean = np.array([pose.fx * xc[0] / xc[2] + pose.cx, pose.fy * xc[1] / xc[2] + pose.cy])
        alpha = 1.0 / (1.0 + np.exp(-cloud.opacity_logits[i]))
        out.append((xc[2], i, mean, np.linalg.inv(cov2), alpha, cloud.intensities[i]))
    out.sort(key=lambda s: (s[0], s[1]))
    return out


def reference_render(cloud: GaussianCloud, pose, width: int, height: int, background=0.0,
                     with_margin: bool = False):
    """Brute-force front-to-back compositing of every splat at every pixel.

    With ``with_margin`` also returns the smallest relative distance of any
    evaluated quantity to one of the compositing thresholds, which tells how
    far the scene is from a discontinuity of the forward model.
    """
    v, u = np.mgrid[0:height, 0:width].astype(np.float64)
    color = np.zeros((height, width))
    T = np.ones((height, width))
    live = np.ones((height, width), bool)
    margin = np.inf
    for _, _, mean, conic, alpha, c in _splats(cloud, pose):
        dx, dy = u - mean[0], v - mean[1]
        m2 = conic[0, 0] * dx * dx + 2 * conic[0, 1] * dx * dy + conic[1, 1] * dy * dy
        a_raw = alpha * np.exp(-0.5 * m2)
        a = np.minimum(a_raw, ALPHA_MAX)
        inside = (m2 <= CUTOFF) & (a >= ALPHA_MIN) & live
        t_next = T * (1 - a)
        stop = inside & (t_next < T_MIN)
        use = inside & ~stop
        if with_margin:
            near = live & (m2 <= CUTOFF * 1.5)
            if near.any():
                margin = min(margin,
                             np.abs(m2[near] / CUTOFF - 1).min(),
                             np.abs(a_raw[near] / ALPHA_MIN - 1).min(),
                             np.abs(a_raw[near] / ALPHA_MAX - 1).min(),
                             np.abs(t_next[near] / T_MIN - 1).min())
        color[use] += c * a[use] * T[use]
        T[use] = t_next[use]
        live &= ~stop
    pixels = color + background * T
    if with_margin:
        return pixels, 1.0 - T, margin
    return pixels, 1.0 - T


# ---------------------------------------------------------------- random scenes

SMALL_GEOM = ScanGeometry(detector_width=40.0, detector_height=40.0, image_width=8,
                          image_height=8, fov_side=30.0)


def random_scene(rng, n, spread=8.0, scale=(2.0, 7.0), extent=10.0):
    return GaussianCloud(
        rng.uniform(-spread, spread, (n, 3)),
        np.log(rng.uniform(*scale, (n, 3))),
        rng.standard_normal((n, 4)),
        rng.uniform(-2.0, 1.5, n),
        rng.uniform(0.1, 1.0, n),
        extent,
    )


def smooth_scene(rng, geom=SMALL_GEOM, max_n=5, margin=1e-3):
    """Random scene and pose whose forward model is smooth within ``margin``.

    Finite differences are only meaningful away from the compositing
    thresholds (3-sigma cutoff, alpha clamps, early termination), so scenes
    that sit on one of them are redrawn.
    """
    while True:
        n = int(rng.integers(1, max_n + 1))
        cloud = random_scene(rng, n)
        pose = pose_at_angle(geom, float(rng.uniform(0, 360)))
        *_, m = reference_render(cloud, pose, geom.image_width, geom.image_height,
                                 with_margin=True)
        if m > margin:
            return cloud, pose


def fd_gradients(f, cloud: GaussianCloud, h=1e-5):
    """Central differences of scalar ``f(cloud)`` for every parameter entry."""
    out = {}
    for name in PARAM_GROUPS:
        arr = getattr(cloud, name)
        g = np.zeros_like(arr)
        for i in np.ndindex(arr.shape):
            old = arr[i]
            arr[i] = old + h
            fp = f(cloud)
            arr[i] = old - h
            fm = f(cloud)
            arr[i] = old
            g[i] = (fp - fm) / (2 * h)
        out[name] = g
    return out


def max_rel_error(analytic, fd, floor=1e-6):
    """Largest |a - fd| / max(|a|, |fd|, floor) over all entries."""
    analytic, fd = np.asarray(analytic), np.asarray(fd)
    if analytic.size == 0:
        return 0.0
    den = np.maximum(np.maximum(np.abs(analytic), np.abs(fd)), floor)
    return float(np.max(np.abs(analytic - fd) / den))
