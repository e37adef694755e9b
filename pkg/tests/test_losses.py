import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from skimage.metrics import structural_similarity

from ctsplat.losses import (BETA_EPS, LossWeights, beta_loss, dssim_loss, l1_loss, ssim_map,
                            ssim_with_grad, total_loss, tv_loss)


class Rendered:
    """Minimal stand-in for a render result: pixels plus an opacity map."""

    def __init__(self, pixels, opacity):
        self.pixels = np.asarray(pixels, dtype=np.float64)
        self.opacity = np.asarray(opacity, dtype=np.float64)


def central_fd(f, x, h=1e-5):
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2 * h)
    return g


def rel_err(a, fd):
    # floor the denominator at 1e-3 of the largest component: FD noise (~1e-11 absolute)
    # would otherwise dominate components that are numerically zero
    floor = 1e-3 * np.abs(fd).max()
    return np.max(np.abs(a - fd) / np.maximum(np.maximum(np.abs(fd), np.abs(a)), floor))


# ---------------------------------------------------------------- L1


def test_l1_examples():
    a = np.random.default_rng(0).random((4, 5))
    v, g = l1_loss(a, a)
    assert v == 0.0 and not g.any()
    assert l1_loss(np.ones((3, 3)), np.zeros((3, 3)))[0] == 1.0
    v, g = l1_loss(np.array([[0.2], [0.8]]), np.array([[0.5], [0.5]]))
    assert v == pytest.approx(0.3, abs=1e-15)
    np.testing.assert_array_equal(g, [[-0.5], [0.5]])
    with pytest.raises(ValueError):
        l1_loss(np.zeros((2, 2)), np.zeros((2, 3)))


# ---------------------------------------------------------------- SSIM


def test_ssim_matches_skimage():
    rng = np.random.default_rng(1)
    for shape in [(11, 11), (16, 16), (32, 20)]:
        x, y = rng.random(shape), rng.random(shape)
        y = 0.5 * x + 0.5 * y
        ref = structural_similarity(x, y, data_range=1.0, gaussian_weights=True, sigma=1.5,
                                    use_sample_covariance=False)
        # skimage crops the 'same' map by (win-1)/2 = 5 px, leaving exactly the valid windows
        assert ssim_map(x, y).mean() == pytest.approx(ref, abs=1e-12)


def test_dssim_examples():
    rng = np.random.default_rng(2)
    x = rng.random((16, 16))
    v, g = dssim_loss(x, x)
    assert v == pytest.approx(0.0, abs=1e-15)
    assert np.abs(g).max() < 1e-12
    v, _ = dssim_loss(1.0 - x, x)
    assert ssim_map(1.0 - x, x).mean() < 0 and v > 0.5
    with pytest.raises(ValueError):
        dssim_loss(np.zeros((10, 16)), np.zeros((10, 16)))


def test_dssim_is_half_one_minus_ssim():
    rng = np.random.default_rng(3)
    x, y = rng.random((20, 20)), rng.random((20, 20))
    assert dssim_loss(x, y)[0] == (1.0 - ssim_map(x, y).mean()) / 2.0


@pytest.mark.parametrize("seed", range(5))
def test_dssim_gradient_fd(seed):
    rng = np.random.default_rng(seed)
    x, y = rng.random((16, 16)), rng.random((16, 16))
    _, g = dssim_loss(x, y)
    fd = central_fd(lambda z: dssim_loss(z, y)[0], x)
    assert rel_err(g, fd) < 1e-5


def test_ssim_symmetric_and_bounded():
    rng = np.random.default_rng(4)
    for _ in range(20):
        x, y = rng.random((14, 14)), rng.random((14, 14)) * rng.random()
        s1, s2 = ssim_map(x, y), ssim_map(y, x)
        assert abs(s1.mean() - s2.mean()) < 1e-12
        assert np.all((s1 >= -1 - 1e-12) & (s1 <= 1 + 1e-12))
    assert ssim_with_grad(x, x)[0] == pytest.approx(1.0)


# ---------------------------------------------------------------- TV


def test_tv_examples():
    assert tv_loss(np.full((5, 4), 0.3))[0] == 0.0
    assert tv_loss(np.array([[0.0, 1.0], [0.0, 1.0]]))[0] == 2.0
    with pytest.raises(ValueError):
        tv_loss(np.zeros((1, 5)))


@settings(max_examples=50, deadline=None)
@given(c=st.floats(0, 10), seed=st.integers(0, 2**16))
def test_tv_positive_homogeneity(c, seed):
    x = np.random.default_rng(seed).random((6, 7))
    assert tv_loss(c * x)[0] == pytest.approx(c * tv_loss(x)[0], rel=1e-12, abs=1e-12)


def test_tv_gradient_fd():
    rng = np.random.default_rng(5)
    x = rng.random((16, 16))  # distinct neighbours almost surely: no kinks within h
    _, g = tv_loss(x)
    fd = central_fd(lambda z: tv_loss(z)[0], x)
    assert rel_err(g, fd) < 1e-4


def test_tv_subgradient_zero_at_ties():
    _, g = tv_loss(np.full((3, 3), 0.5))
    assert not g.any()


# ---------------------------------------------------------------- Beta


def test_beta_examples():
    v, g = beta_loss(np.full((4, 4), 0.5))
    assert v == pytest.approx(2 * math.log(0.5), abs=1e-9)
    assert not g.any()
    v, g = beta_loss(np.zeros((3, 3)))
    assert v == pytest.approx(math.log(BETA_EPS) + math.log(1 - BETA_EPS), abs=1e-9)
    assert v == pytest.approx(-9.2104, abs=1e-4)
    assert not g.any()
    with pytest.raises(ValueError):
        beta_loss(None)


def test_beta_gradient_fd_inside_clamp():
    rng = np.random.default_rng(6)
    o = rng.uniform(0.01, 0.99, (16, 16))
    _, g = beta_loss(o)
    fd = central_fd(lambda z: beta_loss(z)[0], o)
    assert rel_err(g, fd) < 1e-4


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**16))
def test_beta_bounds(seed):
    o = np.random.default_rng(seed).random((5, 5))
    v = beta_loss(o)[0]
    assert 2 * math.log(BETA_EPS) <= math.log(BETA_EPS) + math.log(1 - BETA_EPS) - 1e-12 <= v
    assert v <= 2 * math.log(0.5) + 1e-12


# ---------------------------------------------------------------- total


def _pair(seed=7, shape=(16, 16)):
    rng = np.random.default_rng(seed)
    return Rendered(rng.random(shape), rng.random(shape)), rng.random(shape)


def test_total_l1_only():
    r, t = _pair()
    rep = total_loss(r, t, LossWeights(1.0, 0.0, 0.0, 0.0))
    assert rep.total == l1_loss(r.pixels, t)[0]


def test_total_on_matching_images():
    r, _ = _pair()
    w = LossWeights()
    rep = total_loss(r, r.pixels, w)
    expected = w.lambda_beta * beta_loss(r.opacity)[0] + w.lambda_tv * tv_loss(r.pixels)[0]
    assert rep.total == pytest.approx(expected, abs=1e-15)


def test_total_is_hand_summed():
    r, t = _pair()
    w = LossWeights()
    rep = total_loss(r, t, w)
    terms = (l1_loss(r.pixels, t)[0], dssim_loss(r.pixels, t)[0], beta_loss(r.opacity)[0],
             tv_loss(r.pixels)[0])
    assert (rep.l1, rep.dssim, rep.beta, rep.tv) == terms
    hand = (w.lambda_l1 * terms[0] + w.lambda_dssim * terms[1] + w.lambda_beta * terms[2]
            + w.lambda_tv * terms[3])
    assert rep.total == pytest.approx(hand, abs=1e-10)
    assert np.isfinite(rep.d_pixels).all() and np.isfinite(rep.d_opacity).all()


def test_total_linear_in_weights():
    r, t = _pair()
    a = total_loss(r, t, LossWeights(0.8, 0.2, 1e-3, 1e-4))
    b = total_loss(r, t, LossWeights(1.6, 0.4, 2e-3, 2e-4))
    assert b.total == 2 * a.total
    np.testing.assert_array_equal(b.d_pixels, 2 * a.d_pixels)
    np.testing.assert_array_equal(b.d_opacity, 2 * a.d_opacity)


def test_total_gradients_fd():
    r, t = _pair(seed=8)
    r.opacity = np.random.default_rng(9).uniform(0.05, 0.95, r.pixels.shape)
    w = LossWeights(0.8, 0.2, 1e-1, 1e-2)
    rep = total_loss(r, t, w)
    fd_p = central_fd(lambda z: total_loss(Rendered(z, r.opacity), t, w).total, r.pixels)
    fd_o = central_fd(lambda z: total_loss(Rendered(r.pixels, z), t, w).total, r.opacity)
    assert rel_err(rep.d_pixels, fd_p) < 1e-4
    assert rel_err(rep.d_opacity, fd_o) < 1e-4


def test_total_requires_opacity():
    with pytest.raises(ValueError):
        total_loss(np.zeros((16, 16)), np.zeros((16, 16)))


@pytest.mark.parametrize("w", [(-1, 0, 0, 0), (0, 0, 0, 0)])
def test_weights_validated(w):
    with pytest.raises(ValueError):
        LossWeights(*w)
