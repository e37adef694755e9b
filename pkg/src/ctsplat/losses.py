"""Image losses with per-pixel gradients for the rasterizer backward pass.

Each term returns ``(value, gradient)`` where ``gradient`` has the shape of
its input image. The SSIM core here is also what :mod:`ctsplat.metrics`
reports, so the D-SSIM loss and the SSIM metric cannot drift apart.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .image import as_array

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03
DATA_RANGE = 1.0
C1 = (SSIM_K1 * DATA_RANGE) ** 2
C2 = (SSIM_K2 * DATA_RANGE) ** 2
BETA_EPS = 1e-4


@dataclass(frozen=True)
class LossWeights:
    lambda_l1: float = 0.8
    lambda_dssim: float = 0.2
    lambda_beta: float = 1e-3
    lambda_tv: float = 1e-4

    def __post_init__(self):
        w = (self.lambda_l1, self.lambda_dssim, self.lambda_beta, self.lambda_tv)
        if any(x < 0 for x in w):
            raise ValueError(f"loss weights must be non-negative, got {w}")
        if not any(x > 0 for x in w):
            raise ValueError("at least one loss weight must be positive")


@dataclass
class LossReport:
    total: float
    l1: float
    dssim: float
    tv: float
    beta: float
    d_pixels: np.ndarray
    d_opacity: np.ndarray


def _check_pair(a, b):
    a, b = as_array(a), as_array(b)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def l1_loss(rendered, target):
    r, t = _check_pair(rendered, target)
    diff = r - t
    return float(np.abs(diff).mean()), np.sign(diff) / diff.size


# ---------------------------------------------------------------- SSIM


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-x**2 / (2 * sigma**2))
    return g / g.sum()


_WINDOW = gaussian_window()


def _blur(x: np.ndarray) -> np.ndarray:
    """Separable 'valid' Gaussian filtering, output shrinks by window-1 per axis."""
    y = sliding_window_view(x, SSIM_WINDOW, axis=0) @ _WINDOW
    return sliding_window_view(y, SSIM_WINDOW, axis=1) @ _WINDOW


def _blur_adjoint(y: np.ndarray) -> np.ndarray:
    # the window is symmetric, so the adjoint is a full (zero-padded) filtering
    p = SSIM_WINDOW - 1
    return _blur(np.pad(y, p))


def _ssim_terms(x, y):
    mx, my = _blur(x), _blur(y)
    sxx = _blur(x * x) - mx * mx
    syy = _blur(y * y) - my * my
    sxy = _blur(x * y) - mx * my
    a1 = 2 * mx * my + C1
    b1 = mx * mx + my * my + C1
    a2 = 2 * sxy + C2
    b2 = sxx + syy + C2
    return mx, my, a1, b1, a2, b2


def ssim_map(x, y) -> np.ndarray:
    """Local SSIM over every full 11x11 window position."""
    x, y = _check_pair(x, y)
    if min(x.shape) < SSIM_WINDOW:
        raise ValueError(f"SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {x.shape}")
    _, _, a1, b1, a2, b2 = _ssim_terms(x, y)
    return a1 * a2 / (b1 * b2)


def ssim_with_grad(x, y) -> tuple[float, np.ndarray]:
    """Mean SSIM and its gradient with respect to ``x``."""
    x, y = _check_pair(x, y)
    if min(x.shape) < SSIM_WINDOW:
        raise ValueError(f"SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {x.shape}")
    mx, my, a1, b1, a2, b2 = _ssim_terms(x, y)
    den = b1 * b2
    s = a1 * a2 / den
    scale = 1.0 / s.size
    d_mx = (2 * my * (a2 - a1) - 2 * mx * s * (b2 - b1)) / den
    d_sxx = -s / b2
    d_sxy = 2 * a1 / den
    grad = (_blur_adjoint(d_mx * scale)
            + 2 * x * _blur_adjoint(d_sxx * scale)
            + y * _blur_adjoint(d_sxy * scale))
    return float(s.mean()), grad


def dssim_loss(rendered, target):
    value, grad = ssim_with_grad(rendered, target)
    return (1.0 - value) / 2.0, -0.5 * grad


# ---------------------------------------------------------------- regularizers


def tv_loss(rendered):
    """Anisotropic total variation: summed absolute neighbour differences."""
    p = as_array(rendered)
    if p.ndim != 2 or min(p.shape) < 2:
        raise ValueError(f"total variation needs an image of at least 2x2, got {p.shape}")
    dv = p[1:, :] - p[:-1, :]
    dh = p[:, 1:] - p[:, :-1]
    grad = np.zeros_like(p)
    sv, sh = np.sign(dv), np.sign(dh)
    grad[1:, :] += sv
    grad[:-1, :] -= sv
    grad[:, 1:] += sh
    grad[:, :-1] -= sh
    return float(np.abs(dv).sum() + np.abs(dh).sum()), grad


def beta_loss(opacity_map, eps: float = BETA_EPS):
    """Mean of log(o) + log(1 - o) over the clamped opacity map."""
    if opacity_map is None:
        raise ValueError("beta regularizer needs an opacity map")
    o = np.asarray(opacity_map, dtype=np.float64)
    oc = np.clip(o, eps, 1.0 - eps)
    value = float(np.mean(np.log(oc) + np.log1p(-oc)))
    inside = (o > eps) & (o < 1.0 - eps)
    grad = np.where(inside, 1.0 / oc - 1.0 / (1.0 - oc), 0.0) / o.size
    return value, grad


def total_loss(rendered, target, weights: LossWeights = LossWeights()) -> LossReport:
    """Weighted sum of the four terms.

    ``rendered`` must expose ``pixels`` (unclamped) and ``opacity``, e.g. a
    :class:`~ctsplat.rasterizer.RenderResult`.
    """
    opacity = getattr(rendered, "opacity", None)
    if opacity is None:
        raise ValueError("rendered image carries no opacity map")
    r, t = _check_pair(rendered, target)
    l1, g_l1 = l1_loss(r, t)
    if min(r.shape) >= SSIM_WINDOW or weights.lambda_dssim:
        ds, g_ds = dssim_loss(r, t)
    else:
        ds, g_ds = 0.0, 0.0
    tv, g_tv = tv_loss(r)
    beta, g_beta = beta_loss(opacity)
    w = weights
    total = w.lambda_l1 * l1 + w.lambda_dssim * ds + w.lambda_beta * beta + w.lambda_tv * tv
    d_pix = w.lambda_l1 * g_l1 + w.lambda_dssim * g_ds + w.lambda_tv * g_tv
    return LossReport(total, l1, ds, tv, beta, d_pix, w.lambda_beta * g_beta)
