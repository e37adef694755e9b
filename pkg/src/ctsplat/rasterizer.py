"""Differentiable tile-based Gaussian rasterizer (CPU, numba).

Forward model, per pixel ``p`` sampled at integer coordinates ``(u, v)``:

* every visible splat ``i`` has a 2-D mean ``m_i`` and covariance ``S_i``
  (EWA projection plus a 0.3 px^2 low-pass dilation);
* splats contribute only inside their 3-sigma ellipse
  (``d^T S_i^-1 d <= 9`` with ``d = p - m_i``), where
  ``alpha_i = min(0.99, opacity_i * exp(-d^T S_i^-1 d / 2))``;
* contributions below 1/255 are skipped; splats are composited front to back
  in (depth, index) order, and compositing stops *before* the splat that
  would push transmittance below 1e-4;
* ``C = sum_i c_i alpha_i T_i``, ``opacity = 1 - T_final`` and the raw pixel
  is ``C + background * T_final``.

The backward pass recomputes per-pixel compositing tile by tile and writes
one gradient row per (tile, splat) entry; rows are reduced per splat in a
fixed order, so results do not depend on the thread count.
"""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

from .geometry import CameraPose
from .image import ProjectionImage
from .scene import PARAM_GROUPS, GaussianCloud

TILE = 16
LOWPASS = 0.3
ALPHA_MAX = 0.99
ALPHA_MIN = 1.0 / 255.0
T_MIN = 1e-4
MAX_POWER = 4.5  # half the squared Mahalanobis radius of the 3-sigma ellipse

# entry-gradient columns
_GU, _GV, _GQA, _GQB, _GQC, _GALPHA, _GINT = range(7)


@dataclass
class SplatProjection:
    """Screen-space splats of the Gaussians visible in one view (one row each)."""

    gaussian_index: np.ndarray  # (M,) index into the cloud
    mean2d: np.ndarray          # (M, 2) pixels
    cov2d: np.ndarray           # (M, 3) dilated covariance (xx, xy, yy), px^2
    conic: np.ndarray           # (M, 3) inverse covariance (xx, xy, yy)
    depth: np.ndarray           # (M,)
    alpha_peak: np.ndarray      # (M,)
    intensity: np.ndarray       # (M,)
    tile_span: np.ndarray       # (M, 4) inclusive tile rect (tx0, ty0, tx1, ty1)
    pixel_box: np.ndarray       # (M, 4) inclusive pixel rect of the 3-sigma ellipse
    # intermediates reused by the backward pass
    cam: np.ndarray             # (M, 3) camera-space means
    jw: np.ndarray              # (M, 2, 3) projection Jacobian times view rotation
    cov3d: np.ndarray           # (M, 3, 3)

    def __len__(self) -> int:
        return len(self.gaussian_index)


@dataclass
class TileBins:
    entry_splat: np.ndarray  # (K,) row into SplatProjection, grouped by tile
    tile_start: np.ndarray   # (n_tiles + 1,) offsets into entry_splat
    tiles_x: int
    tiles_y: int


@dataclass
class RenderResult:
    """Unclamped render of one view plus what the backward pass needs."""

    pixels: np.ndarray          # raw C + background * T_final
    opacity: np.ndarray         # 1 - T_final
    transmittance: np.ndarray   # T_final
    proj: SplatProjection
    bins: TileBins
    background: float
    view_angle_deg: float = 0.0

    def image(self) -> ProjectionImage:
        return ProjectionImage(np.clip(self.pixels, 0.0, 1.0), self.view_angle_deg,
                               np.clip(self.opacity, 0.0, 1.0))


@dataclass
class GradientBuffer:
    """Per-Gaussian loss gradients plus screen-space statistics for densification."""

    positions: np.ndarray
    log_scales: np.ndarray
    rotations: np.ndarray
    opacity_logits: np.ndarray
    intensities: np.ndarray
    mean2d_grad_norm: np.ndarray  # |dL/d mean2d| in NDC units, 0 where not visible
    visible: np.ndarray           # bool, Gaussian was rendered in this view

    @classmethod
    def zeros(cls, n: int) -> GradientBuffer:
        return cls(np.zeros((n, 3)), np.zeros((n, 3)), np.zeros((n, 4)), np.zeros(n),
                   np.zeros(n), np.zeros(n), np.zeros(n, dtype=bool))

    def params(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_GROUPS}

    def check_finite(self) -> None:
        for name in PARAM_GROUPS:
            g = getattr(self, name)
            bad = ~np.isfinite(g.reshape(len(g), -1)).all(axis=1)
            if bad.any():
                raise FloatingPointError(
                    f"non-finite {name} gradient for Gaussian {int(np.flatnonzero(bad)[0])}")


# ---------------------------------------------------------------- projection


@numba.njit(cache=True, inline="always")
def _quat_to_rot(q, out):
    n = np.sqrt(q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3])
    w = q[0] / n
    x = q[1] / n
    y = q[2] / n
    z = q[3] / n
    out[0, 0] = 1 - 2 * (y * y + z * z)
    out[0, 1] = 2 * (x * y - w * z)
    out[0, 2] = 2 * (x * z + w * y)
    out[1, 0] = 2 * (x * y + w * z)
    out[1, 1] = 1 - 2 * (x * x + z * z)
    out[1, 2] = 2 * (y * z - w * x)
    out[2, 0] = 2 * (x * z - w * y)
    out[2, 1] = 2 * (y * z + w * x)
    out[2, 2] = 1 - 2 * (x * x + y * y)


@numba.njit(cache=True)
def _project_all(pos, log_scales, quats, opacity_logits, wrot, center, fx, fy, cx, cy, near,
                 width, height, valid, mean, cov2, conic, depth, alpha, pbox, cam, jw, cov3):
    n = len(pos)
    rot = np.empty((3, 3))
    m = np.empty((3, 3))
    tmp = np.empty((2, 3))
    for i in range(n):
        valid[i] = False
        a_peak = 1.0 / (1.0 + np.exp(-opacity_logits[i]))
        alpha[i] = a_peak
        for r in range(3):
            cam[i, r] = (wrot[r, 0] * (pos[i, 0] - center[0]) + wrot[r, 1] * (pos[i, 1] - center[1])
                         + wrot[r, 2] * (pos[i, 2] - center[2]))
        x = cam[i, 0]
        y = cam[i, 1]
        z = cam[i, 2]
        depth[i] = z
        if z <= near or a_peak < ALPHA_MIN:
            continue
        # world covariance M M^T with M = R diag(s)
        _quat_to_rot(quats[i], rot)
        for r in range(3):
            for c in range(3):
                m[r, c] = rot[r, c] * np.exp(log_scales[i, c])
        for r in range(3):
            for c in range(3):
                cov3[i, r, c] = m[r, 0] * m[c, 0] + m[r, 1] * m[c, 1] + m[r, 2] * m[c, 2]
        j00 = fx / z
        j02 = -fx * x / (z * z)
        j11 = fy / z
        j12 = -fy * y / (z * z)
        for c in range(3):
            jw[i, 0, c] = j00 * wrot[0, c] + j02 * wrot[2, c]
            jw[i, 1, c] = j11 * wrot[1, c] + j12 * wrot[2, c]
        for r in range(2):
            for c in range(3):
                tmp[r, c] = jw[i, r, 0] * cov3[i, 0, c] + jw[i, r, 1] * cov3[i, 1, c] + jw[i, r, 2] * cov3[i, 2, c]
        a = tmp[0, 0] * jw[i, 0, 0] + tmp[0, 1] * jw[i, 0, 1] + tmp[0, 2] * jw[i, 0, 2] + LOWPASS
        b = tmp[0, 0] * jw[i, 1, 0] + tmp[0, 1] * jw[i, 1, 1] + tmp[0, 2] * jw[i, 1, 2]
        c_ = tmp[1, 0] * jw[i, 1, 0] + tmp[1, 1] * jw[i, 1, 1] + tmp[1, 2] * jw[i, 1, 2] + LOWPASS
        det = a * c_ - b * b
        if det <= 0.0:
            continue
        u = fx * x / z + cx
        v = fy * y / z + cy
        # pixel box of the 3-sigma ellipse, widened slightly so it is a strict superset
        rx = 3.0 * np.sqrt(a) + 1e-6
        ry = 3.0 * np.sqrt(c_) + 1e-6
        px0 = max(np.ceil(u - rx), 0.0)
        px1 = min(np.floor(u + rx), width - 1.0)
        py0 = max(np.ceil(v - ry), 0.0)
        py1 = min(np.floor(v + ry), height - 1.0)
        if px0 > px1 or py0 > py1:
            continue
        valid[i] = True
        mean[i, 0] = u
        mean[i, 1] = v
        cov2[i, 0] = a
        cov2[i, 1] = b
        cov2[i, 2] = c_
        conic[i, 0] = c_ / det
        conic[i, 1] = -b / det
        conic[i, 2] = a / det
        pbox[i, 0] = int(px0)
        pbox[i, 1] = int(py0)
        pbox[i, 2] = int(px1)
        pbox[i, 3] = int(py1)


def project_gaussians(cloud: GaussianCloud, pose: CameraPose, width: int, height: int) -> SplatProjection:
    """EWA-project the cloud; drops splats behind the near plane, off-image or nearly transparent."""
    n = len(cloud)
    valid = np.zeros(n, np.bool_)
    mean, cov2, conic = np.zeros((n, 2)), np.zeros((n, 3)), np.zeros((n, 3))
    depth, alpha = np.zeros(n), np.zeros(n)
    pbox = np.zeros((n, 4), np.int64)
    cam, jw, cov3 = np.zeros((n, 3)), np.zeros((n, 2, 3)), np.zeros((n, 3, 3))
    if n:
        _project_all(cloud.positions, cloud.log_scales, cloud.rotations, cloud.opacity_logits,
                     np.ascontiguousarray(pose.rotation), np.asarray(pose.camera_center, np.float64),
                     float(pose.fx), float(pose.fy), float(pose.cx), float(pose.cy), float(pose.near),
                     int(width), int(height), valid, mean, cov2, conic, depth, alpha, pbox, cam, jw, cov3)
    idx = np.flatnonzero(valid)
    box = pbox[idx]
    return SplatProjection(
        gaussian_index=idx,
        mean2d=mean[idx],
        cov2d=cov2[idx],
        conic=conic[idx],
        depth=depth[idx],
        alpha_peak=alpha[idx],
        intensity=cloud.intensities[idx],
        tile_span=box // TILE,
        pixel_box=box,
        cam=cam[idx],
        jw=jw[idx],
        cov3d=cov3[idx],
    )


@numba.njit(cache=True)
def _expand_tiles(order, span, tiles_x, counts_total):
    tile_id = np.empty(counts_total, np.int64)
    splat = np.empty(counts_total, np.int64)
    k = 0
    for s in order:
        for ty in range(span[s, 1], span[s, 3] + 1):
            for tx in range(span[s, 0], span[s, 2] + 1):
                tile_id[k] = ty * tiles_x + tx
                splat[k] = s
                k += 1
    return tile_id, splat


def bin_splats(proj: SplatProjection, width: int, height: int) -> TileBins:
    """Per-tile splat lists, each sorted by (depth, Gaussian index)."""
    tiles_x = -(-width // TILE)
    tiles_y = -(-height // TILE)
    order = np.lexsort((proj.gaussian_index, proj.depth)).astype(np.int64)
    span = proj.tile_span
    counts = (span[:, 2] - span[:, 0] + 1) * (span[:, 3] - span[:, 1] + 1)
    tile_id, splat = _expand_tiles(order, span, tiles_x, int(counts.sum()))
    by_tile = np.argsort(tile_id, kind="stable")
    tile_start = np.searchsorted(tile_id[by_tile], np.arange(tiles_x * tiles_y + 1))
    return TileBins(splat[by_tile], tile_start.astype(np.int64), tiles_x, tiles_y)


# ---------------------------------------------------------------- kernels
#
# Each tile copies its depth-ordered splats into contiguous arrays. A pixel row
# then walks the splats whose pixel box covers that row, front to back, and
# updates only the pixels inside the box. Every pixel still sees exactly the
# per-pixel compositing sequence described in the module docstring; the box
# contains the whole 3-sigma ellipse so no contribution is lost.


@numba.njit(cache=True, inline="always")
def _gather_tile(start, end, entry_splat, pbox, mean, conic, alpha_peak, intensity, loc_i, loc_f):
    for k in range(end - start):
        s = entry_splat[start + k]
        loc_i[k, 0] = pbox[s, 0]
        loc_i[k, 1] = pbox[s, 1]
        loc_i[k, 2] = pbox[s, 2]
        loc_i[k, 3] = pbox[s, 3]
        loc_f[k, 0] = mean[s, 0]
        loc_f[k, 1] = mean[s, 1]
        loc_f[k, 2] = conic[s, 0]
        loc_f[k, 3] = conic[s, 1]
        loc_f[k, 4] = conic[s, 2]
        loc_f[k, 5] = alpha_peak[s]
        loc_f[k, 6] = intensity[s]


@numba.njit(cache=True, parallel=True)
def _forward(tile_start, entry_splat, pbox, mean, conic, alpha_peak, intensity,
             width, height, tiles_x, color, trans):
    n_tiles = len(tile_start) - 1
    for t in numba.prange(n_tiles):
        ty = t // tiles_x
        tx = t - ty * tiles_x
        start = tile_start[t]
        n = tile_start[t + 1] - start
        x_lo = tx * TILE
        x_hi = min(x_lo + TILE, width)
        loc_i = np.empty((n, 4), np.int64)
        loc_f = np.empty((n, 7))
        _gather_tile(start, start + n, entry_splat, pbox, mean, conic, alpha_peak, intensity,
                     loc_i, loc_f)
        T = np.empty(TILE)
        acc = np.empty(TILE)
        active = np.empty(TILE, np.bool_)
        for py in range(ty * TILE, min((ty + 1) * TILE, height)):
            for j in range(TILE):
                T[j] = 1.0
                acc[j] = 0.0
                active[j] = True
            n_active = x_hi - x_lo
            for k in range(n):
                if py < loc_i[k, 1] or py > loc_i[k, 3]:
                    continue
                mx = loc_f[k, 0]
                dy = py - loc_f[k, 1]
                qa = loc_f[k, 2]
                qb = loc_f[k, 3]
                qc = loc_f[k, 4]
                for px in range(max(loc_i[k, 0], x_lo), min(loc_i[k, 2] + 1, x_hi)):
                    j = px - x_lo
                    if not active[j]:
                        continue
                    dx = px - mx
                    power = 0.5 * (qa * dx * dx + qc * dy * dy) + qb * dx * dy
                    if power > MAX_POWER:
                        continue
                    a = loc_f[k, 5] * np.exp(-power)
                    if a > ALPHA_MAX:
                        a = ALPHA_MAX
                    if a < ALPHA_MIN:
                        continue
                    tn = T[j] * (1.0 - a)
                    if tn < T_MIN:
                        active[j] = False
                        n_active -= 1
                        continue
                    acc[j] += loc_f[k, 6] * a * T[j]
                    T[j] = tn
                if n_active == 0:
                    break
            for px in range(x_lo, x_hi):
                color[py, px] = acc[px - x_lo]
                trans[py, px] = T[px - x_lo]


@numba.njit(cache=True, parallel=True)
def _backward(tile_start, entry_splat, pbox, mean, conic, alpha_peak, intensity,
              width, height, tiles_x, background, d_pix, d_op, eg):
    n_tiles = len(tile_start) - 1
    for t in numba.prange(n_tiles):
        ty = t // tiles_x
        tx = t - ty * tiles_x
        start = tile_start[t]
        n = tile_start[t + 1] - start
        if n == 0:
            continue
        x_lo = tx * TILE
        x_hi = min(x_lo + TILE, width)
        loc_i = np.empty((n, 4), np.int64)
        loc_f = np.empty((n, 7))
        _gather_tile(start, start + n, entry_splat, pbox, mean, conic, alpha_peak, intensity,
                     loc_i, loc_f)
        loc_g = np.zeros((n, 7))
        # per pixel of the current row: contributors in compositing order
        c_k = np.empty((TILE, n), np.int64)
        c_alpha = np.empty((TILE, n))
        c_gauss = np.empty((TILE, n))
        c_trans = np.empty((TILE, n))
        c_clamped = np.empty((TILE, n), np.bool_)
        cnt = np.empty(TILE, np.int64)
        T = np.empty(TILE)
        active = np.empty(TILE, np.bool_)
        for py in range(ty * TILE, min((ty + 1) * TILE, height)):
            n_active = 0
            for j in range(TILE):
                T[j] = 1.0
                cnt[j] = 0
                px = x_lo + j
                active[j] = px < x_hi and (d_pix[py, px] != 0.0 or d_op[py, px] != 0.0)
                if active[j]:
                    n_active += 1
            if n_active == 0:
                continue
            # replay the forward compositing, remembering contributors
            for k in range(n):
                if py < loc_i[k, 1] or py > loc_i[k, 3]:
                    continue
                mx = loc_f[k, 0]
                dy = py - loc_f[k, 1]
                qa = loc_f[k, 2]
                qb = loc_f[k, 3]
                qc = loc_f[k, 4]
                for px in range(max(loc_i[k, 0], x_lo), min(loc_i[k, 2] + 1, x_hi)):
                    j = px - x_lo
                    if not active[j]:
                        continue
                    dx = px - mx
                    power = 0.5 * (qa * dx * dx + qc * dy * dy) + qb * dx * dy
                    if power > MAX_POWER:
                        continue
                    g = np.exp(-power)
                    a = loc_f[k, 5] * g
                    clamped = False
                    if a > ALPHA_MAX:
                        a = ALPHA_MAX
                        clamped = True
                    if a < ALPHA_MIN:
                        continue
                    tn = T[j] * (1.0 - a)
                    if tn < T_MIN:
                        active[j] = False
                        n_active -= 1
                        continue
                    m = cnt[j]
                    c_k[j, m] = k
                    c_alpha[j, m] = a
                    c_gauss[j, m] = g
                    c_trans[j, m] = T[j]
                    c_clamped[j, m] = clamped
                    cnt[j] = m + 1
                    T[j] = tn
                if n_active == 0:
                    break
            # reverse sweep per pixel
            for j in range(x_hi - x_lo):
                px = x_lo + j
                dp = d_pix[py, px]
                dop = d_op[py, px]
                if dp == 0.0 and dop == 0.0:
                    continue
                t_final = T[j]
                behind = background * t_final  # colour composited behind the current splat
                for m in range(cnt[j] - 1, -1, -1):
                    k = c_k[j, m]
                    a = c_alpha[j, m]
                    ti = c_trans[j, m]
                    c = loc_f[k, 6]
                    loc_g[k, _GINT] += dp * a * ti
                    one_minus = 1.0 - a
                    dl_da = dp * (c * ti - behind / one_minus) + dop * t_final / one_minus
                    behind += c * a * ti
                    if c_clamped[j, m]:
                        continue
                    loc_g[k, _GALPHA] += dl_da * c_gauss[j, m]
                    dl_dpow = -dl_da * a
                    dx = px - loc_f[k, 0]
                    dy = py - loc_f[k, 1]
                    qa = loc_f[k, 2]
                    qb = loc_f[k, 3]
                    qc = loc_f[k, 4]
                    loc_g[k, _GU] -= dl_dpow * (qa * dx + qb * dy)
                    loc_g[k, _GV] -= dl_dpow * (qb * dx + qc * dy)
                    loc_g[k, _GQA] += dl_dpow * 0.5 * dx * dx
                    loc_g[k, _GQB] += dl_dpow * dx * dy
                    loc_g[k, _GQC] += dl_dpow * 0.5 * dy * dy
        for k in range(n):
            for col in range(7):
                eg[start + k, col] = loc_g[k, col]


@numba.njit(cache=True)
def _reduce_entries(entry_splat, eg, n_splats):
    out = np.zeros((n_splats, eg.shape[1]))
    for e in range(len(entry_splat)):
        s = entry_splat[e]
        for j in range(eg.shape[1]):
            out[s, j] += eg[e, j]
    return out


@numba.njit(cache=True)
def _project_backward(gidx, quats, log_scales, cam, jw, cov3, cov2, alpha, g, wrot, fx, fy,
                      d_pos, d_log_scale, d_quat, d_logit, d_int):
    """Chain screen-space gradients back to the Gaussian parameters."""
    rot = np.empty((3, 3))
    g2 = np.empty((2, 2))
    d_cov3 = np.empty((3, 3))
    tmp = np.empty((2, 3))
    d_jw = np.empty((2, 3))
    d_m = np.empty((3, 3))
    d_rot = np.empty((3, 3))
    for s in range(len(gidx)):
        i = gidx[s]
        # conic (inverse of [[a, b], [b, c]]) -> covariance entries
        a = cov2[s, 0]
        b = cov2[s, 1]
        c = cov2[s, 2]
        det = a * c - b * b
        det2 = det * det
        gqa = g[s, _GQA]
        gqb = g[s, _GQB]
        gqc = g[s, _GQC]
        ga = (-c * c * gqa + b * c * gqb - b * b * gqc) / det2
        gb = (2 * b * c * gqa + 2 * a * b * gqc) / det2 - gqb * (1.0 / det + 2 * b * b / det2)
        gc = (-b * b * gqa + a * b * gqb - a * a * gqc) / det2
        g2[0, 0] = ga
        g2[0, 1] = 0.5 * gb
        g2[1, 0] = 0.5 * gb
        g2[1, 1] = gc
        # cov2 = JW cov3 (JW)^T
        for r in range(2):
            for k in range(3):
                tmp[r, k] = g2[r, 0] * jw[s, 0, k] + g2[r, 1] * jw[s, 1, k]
        for r in range(3):
            for k in range(3):
                d_cov3[r, k] = jw[s, 0, r] * tmp[0, k] + jw[s, 1, r] * tmp[1, k]
        for r in range(2):
            for k in range(3):
                d_jw[r, k] = 2.0 * (tmp[r, 0] * cov3[s, 0, k] + tmp[r, 1] * cov3[s, 1, k]
                                    + tmp[r, 2] * cov3[s, 2, k])
        # JW = J W, only four Jacobian entries depend on the camera-space mean
        dj00 = d_jw[0, 0] * wrot[0, 0] + d_jw[0, 1] * wrot[0, 1] + d_jw[0, 2] * wrot[0, 2]
        dj02 = d_jw[0, 0] * wrot[2, 0] + d_jw[0, 1] * wrot[2, 1] + d_jw[0, 2] * wrot[2, 2]
        dj11 = d_jw[1, 0] * wrot[1, 0] + d_jw[1, 1] * wrot[1, 1] + d_jw[1, 2] * wrot[1, 2]
        dj12 = d_jw[1, 0] * wrot[2, 0] + d_jw[1, 1] * wrot[2, 1] + d_jw[1, 2] * wrot[2, 2]
        x = cam[s, 0]
        y = cam[s, 1]
        z = cam[s, 2]
        gu = g[s, _GU]
        gv = g[s, _GV]
        z2 = z * z
        z3 = z2 * z
        dcx = gu * fx / z - dj02 * fx / z2
        dcy = gv * fy / z - dj12 * fy / z2
        dcz = (-gu * fx * x / z2 - gv * fy * y / z2 - dj00 * fx / z2 + dj02 * 2 * fx * x / z3
               - dj11 * fy / z2 + dj12 * 2 * fy * y / z3)
        for k in range(3):
            d_pos[i, k] = dcx * wrot[0, k] + dcy * wrot[1, k] + dcz * wrot[2, k]
        # cov3 = M M^T, M = R diag(s)
        q = quats[i]
        qn = np.sqrt(q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3])
        _quat_to_rot(q, rot)
        for k in range(3):
            sk = np.exp(log_scales[i, k])
            ds = 0.0
            for r in range(3):
                dm = 2.0 * (d_cov3[r, 0] * rot[0, k] + d_cov3[r, 1] * rot[1, k]
                            + d_cov3[r, 2] * rot[2, k]) * sk
                d_m[r, k] = dm
                ds += dm * rot[r, k]
                d_rot[r, k] = dm * sk
            d_log_scale[i, k] = ds * sk
        w = q[0] / qn
        qx = q[1] / qn
        qy = q[2] / qn
        qz = q[3] / qn
        r_ = d_rot
        dw = 2 * (-qz * r_[0, 1] + qy * r_[0, 2] + qz * r_[1, 0] - qx * r_[1, 2]
                  - qy * r_[2, 0] + qx * r_[2, 1])
        dx = 2 * (qy * r_[0, 1] + qz * r_[0, 2] + qy * r_[1, 0] - 2 * qx * r_[1, 1]
                  - w * r_[1, 2] + qz * r_[2, 0] + w * r_[2, 1] - 2 * qx * r_[2, 2])
        dy = 2 * (-2 * qy * r_[0, 0] + qx * r_[0, 1] + w * r_[0, 2] + qx * r_[1, 0]
                  + qz * r_[1, 2] - w * r_[2, 0] + qz * r_[2, 1] - 2 * qy * r_[2, 2])
        dz = 2 * (-2 * qz * r_[0, 0] - w * r_[0, 1] + qx * r_[0, 2] + w * r_[1, 0]
                  - 2 * qz * r_[1, 1] + qy * r_[1, 2] + qx * r_[2, 0] + qy * r_[2, 1])
        # through the normalization q / |q|
        dot = w * dw + qx * dx + qy * dy + qz * dz
        d_quat[i, 0] = (dw - w * dot) / qn
        d_quat[i, 1] = (dx - qx * dot) / qn
        d_quat[i, 2] = (dy - qy * dot) / qn
        d_quat[i, 3] = (dz - qz * dot) / qn
        d_logit[i] = g[s, _GALPHA] * alpha[s] * (1.0 - alpha[s])
        d_int[i] = g[s, _GINT]


# ---------------------------------------------------------------- public API


def rasterize(cloud: GaussianCloud, pose: CameraPose, width: int | None = None,
              height: int | None = None, background: float = 0.0) -> RenderResult:
    width = width or pose.width
    height = height or pose.height
    proj = project_gaussians(cloud, pose, width, height)
    bins = bin_splats(proj, width, height)
    color = np.zeros((height, width))
    trans = np.ones((height, width))
    if len(proj):
        _forward(bins.tile_start, bins.entry_splat, proj.pixel_box, proj.mean2d, proj.conic,
                 proj.alpha_peak, proj.intensity, width, height, bins.tiles_x, color, trans)
    return RenderResult(color + background * trans, 1.0 - trans, trans, proj, bins,
                        float(background), pose.view_angle_deg)


def render(cloud: GaussianCloud, pose: CameraPose, width: int | None = None,
           height: int | None = None, background: float = 0.0) -> ProjectionImage:
    """Render one view; pixels and opacity map clamped to [0, 1]."""
    return rasterize(cloud, pose, width, height, background).image()


def render_backward(cloud: GaussianCloud, pose: CameraPose, width: int | None = None,
                    height: int | None = None, background: float = 0.0,
                    d_pixels: np.ndarray | None = None, d_opacity: np.ndarray | None = None,
                    ctx: RenderResult | None = None) -> GradientBuffer:
    """Gradients of ``sum(d_pixels * raw) + sum(d_opacity * opacity)`` w.r.t. the cloud.

    ``ctx`` reuses the projection and tile lists of a matching forward pass.
    """
    width = width or pose.width
    height = height or pose.height
    if ctx is None:
        ctx = rasterize(cloud, pose, width, height, background)
    d_pixels = np.zeros((height, width)) if d_pixels is None else np.asarray(d_pixels, np.float64)
    d_opacity = np.zeros((height, width)) if d_opacity is None else np.asarray(d_opacity, np.float64)
    if d_pixels.shape != (height, width) or d_opacity.shape != (height, width):
        raise ValueError("gradient images must match the render size")

    proj, bins = ctx.proj, ctx.bins
    grads = GradientBuffer.zeros(len(cloud))
    if len(proj) == 0:
        return grads
    eg = np.zeros((len(bins.entry_splat), 7))
    _backward(bins.tile_start, bins.entry_splat, proj.pixel_box, proj.mean2d, proj.conic,
              proj.alpha_peak, proj.intensity, width, height, bins.tiles_x, float(background),
              np.ascontiguousarray(d_pixels), np.ascontiguousarray(d_opacity), eg)
    g = _reduce_entries(bins.entry_splat, eg, len(proj))
    _project_backward(proj.gaussian_index, cloud.rotations, cloud.log_scales, proj.cam, proj.jw,
                      proj.cov3d, proj.cov2d, proj.alpha_peak, g, np.ascontiguousarray(pose.rotation),
                      float(pose.fx), float(pose.fy), grads.positions, grads.log_scales,
                      grads.rotations, grads.opacity_logits, grads.intensities)
    grads.mean2d_grad_norm[proj.gaussian_index] = np.hypot(
        g[:, _GU] * 0.5 * width, g[:, _GV] * 0.5 * height)
    grads.visible[proj.gaussian_index] = True
    grads.check_finite()
    return grads
