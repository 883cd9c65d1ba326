import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spsmask.errors import InputError
from spsmask.params import ConvKernel
from spsmask.tensor import (
    FeaturePyramid,
    RoiDetection,
    bilinear_sample,
    cell_centers,
    dense_conv2d,
    level_select_initial,
    level_select_stage,
    roi_align,
    roi_align_points,
    upsample_nearest,
)


@pytest.mark.parametrize("w,h,k0", [(56, 56, 2), (448, 448, 5), (1, 1, 2), (112, 112, 3), (224, 224, 4), (4000, 4000, 5)])
def test_level_select_initial(w, h, k0):
    assert level_select_initial(w, h) == k0


@pytest.mark.parametrize("k0,s,ks", [(5, 1, 4), (2, 3, 2), (4, 3, 2), (5, 3, 2), (7, 0, 7)])
def test_level_select_stage(k0, s, ks):
    assert level_select_stage(k0, s) == ks


@pytest.mark.parametrize("w,h", [(0, 5), (5, 0), (-1, 3)])
def test_level_select_rejects_degenerate(w, h):
    with pytest.raises(InputError):
        level_select_initial(w, h)


@given(st.floats(0.5, 5000), st.floats(0.5, 5000))
def test_level_select_monotone(a, b):
    lo, hi = sorted((a, b))
    assert level_select_initial(lo, lo) <= level_select_initial(hi, hi)
    assert 2 <= level_select_initial(a, b) <= 7


def test_pyramid_level_sizes():
    p = FeaturePyramid.constant((100, 130), 3, 1.0)
    for k in range(2, 8):
        assert p.levels[k].shape == (3, math.ceil(100 / 2**k), math.ceil(130 / 2**k))
    assert p.channels == 3


def test_pyramid_rejects_wrong_size():
    levels = {k: np.zeros((2, 4, 4)) for k in range(2, 8)}
    with pytest.raises(InputError):
        FeaturePyramid((64, 64), levels)


def test_roi_detection_box_checks():
    with pytest.raises(InputError):
        RoiDetection((5, 5, 5, 10), 0.5, np.zeros(4))
    with pytest.raises(InputError):
        RoiDetection((0, 0, 4, 4), 1.5, np.zeros(4))


# -- bilinear -------------------------------------------------------------------

def test_bilinear_at_center(rng):
    g = rng.standard_normal((2, 3, 5, 6))
    np.testing.assert_array_equal(bilinear_sample(g, 1, (2.5, 3.5)), g[1, :, 2, 3])


def test_bilinear_midpoint(rng):
    g = rng.standard_normal((1, 3, 4, 4))
    np.testing.assert_allclose(bilinear_sample(g, 0, (1.5, 2.0)), (g[0, :, 1, 1] + g[0, :, 1, 2]) / 2)


def test_bilinear_far_outside_is_zero(rng):
    g = rng.standard_normal((1, 3, 4, 4)) + 5
    np.testing.assert_array_equal(bilinear_sample(g, 0, (-10.0, -10.0)), np.zeros(3))


def test_bilinear_edge_blends_with_padding():
    g = np.ones((1, 1, 2, 2))
    # half way between the last center and the zero padding beyond it
    assert bilinear_sample(g, 0, (1.0, 2.0))[0] == pytest.approx(0.5)


def naive_bilinear(fmap, y, x):
    c, h, w = fmap.shape
    y0, x0 = math.floor(y - 0.5), math.floor(x - 0.5)
    fy, fx = y - 0.5 - y0, x - 0.5 - x0
    out = np.zeros(c)
    for dy, wy in ((0, 1 - fy), (1, fy)):
        for dx, wx in ((0, 1 - fx), (1, fx)):
            r, q = y0 + dy, x0 + dx
            if 0 <= r < h and 0 <= q < w:
                out += wy * wx * fmap[:, r, q]
    return out


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(-3, 10), st.floats(-3, 10), st.floats(-2, 2), st.floats(-2, 2))
def test_bilinear_linear_in_grid(seed, y, x, a, b):
    r = np.random.default_rng(seed)
    g1, g2 = r.standard_normal((2, 1, 3, 6, 7))
    lhs = bilinear_sample(a * g1 + b * g2, 0, (y, x))
    rhs = a * bilinear_sample(g1, 0, (y, x)) + b * bilinear_sample(g2, 0, (y, x))
    np.testing.assert_allclose(lhs, rhs, rtol=1e-9, atol=1e-12)
    np.testing.assert_allclose(bilinear_sample(g1, 0, (y, x)), naive_bilinear(g1[0], y, x), rtol=1e-9, atol=1e-12)


# -- RoIAlign -------------------------------------------------------------------

def test_roi_align_constant():
    p = FeaturePyramid.constant((256, 256), 4, 2.5)
    out = roi_align(p, (40.0, 50.0, 140.0, 120.0))
    assert out.shape == (4, 14, 14)
    np.testing.assert_allclose(out, 2.5, rtol=1e-12)


def test_roi_align_linear_ramp():
    p = FeaturePyramid.constant((256, 256), 1, 0.0)
    level = level_select_initial(56, 56)
    h, w = p.levels[level].shape[1:]
    p.levels[level][0] = np.arange(w)[None, :] + 0.5 + 0 * np.arange(h)[:, None]
    box = (56.0, 56.0, 112.0, 112.0)  # 14 x 14 level cells, aligned to the grid
    out = roi_align(p, box)
    stride = 2**level
    expect = box[0] / stride + (np.arange(14) + 0.5) * (56 / stride / 14)
    np.testing.assert_allclose(out[0], np.broadcast_to(expect, (14, 14)), rtol=1e-12)


def test_roi_align_matches_naive(rng):
    p = FeaturePyramid.random((200, 240), 5, rng)
    for _ in range(5):
        x1, y1 = rng.uniform(0, 120), rng.uniform(0, 100)
        box = (x1, y1, x1 + rng.uniform(4, 110), y1 + rng.uniform(4, 95))
        w, h = box[2] - box[0], box[3] - box[1]
        level = level_select_initial(w, h)
        fmap = p.levels[level]
        s = 2.0**level
        expect = np.zeros((5, 14, 14))
        for i in range(14):
            for j in range(14):
                acc = np.zeros(5)
                for a in range(2):
                    for b in range(2):
                        y = box[1] / s + (i + (a + 0.5) / 2) * (h / s) / 14
                        x = box[0] / s + (j + (b + 0.5) / 2) * (w / s) / 14
                        acc += naive_bilinear(fmap, y, x)
                expect[:, i, j] = acc / 4
        np.testing.assert_allclose(roi_align(p, box), expect, rtol=1e-6, atol=1e-12)


def test_roi_align_points_shape():
    rows, cols = roi_align_points((0, 0, 28, 28), 2, 14, 14)
    assert rows.shape == cols.shape == (14, 14, 4)


def test_roi_align_degenerate():
    p = FeaturePyramid.constant((64, 64), 1, 1.0)
    with pytest.raises(InputError):
        roi_align(p, (10.0, 10.0, 10.0, 20.0))


# -- convolution ----------------------------------------------------------------

def naive_conv(grid, kernel):
    n, f, h, w = grid.shape
    d = kernel.dilation
    out = np.zeros((n, kernel.f_out, h, w))
    for r in range(n):
        for o in range(kernel.f_out):
            for i in range(h):
                for j in range(w):
                    acc = kernel.bias[o]
                    for c in range(f):
                        for ky in range(3):
                            for kx in range(3):
                                y, x = i + (ky - 1) * d, j + (kx - 1) * d
                                if 0 <= y < h and 0 <= x < w:
                                    acc += kernel.weight[o, c, ky, kx] * grid[r, c, y, x]
                    out[r, o, i, j] = acc
    return out


def test_conv_identity(rng):
    g = rng.standard_normal((2, 3, 5, 4))
    for d in (1, 3):
        np.testing.assert_array_equal(dense_conv2d(g, ConvKernel.identity(3, d)), g)


def test_conv_counting():
    out = dense_conv2d(np.ones((1, 1, 3, 3)), ConvKernel(np.ones((1, 1, 3, 3)), np.zeros(1)))
    assert out[0, 0, 1, 1] == 9
    assert out[0, 0, 0, 0] == out[0, 0, 2, 2] == 4
    assert out[0, 0, 0, 1] == 6


@pytest.mark.parametrize("d", [1, 3, 5])
def test_conv_matches_loop_oracle(rng, d):
    g = rng.standard_normal((2, 3, 7, 6))
    k = ConvKernel(rng.standard_normal((2, 3, 3, 3)), rng.standard_normal(2), d)
    np.testing.assert_allclose(dense_conv2d(g, k), naive_conv(g, k), rtol=1e-6, atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from([1, 3, 5]))
def test_conv_exact_on_integers(seed, d):
    r = np.random.default_rng(seed)
    g = r.integers(-4, 5, size=(1, 2, 6, 5)).astype(float)
    k = ConvKernel(r.integers(-3, 4, size=(3, 2, 3, 3)).astype(float), r.integers(-3, 4, size=3).astype(float), d)
    np.testing.assert_array_equal(dense_conv2d(g, k), naive_conv(g, k))


def test_conv_channel_mismatch():
    with pytest.raises(InputError):
        dense_conv2d(np.zeros((1, 2, 3, 3)), ConvKernel.identity(3))


def test_conv_rejects_nonfinite():
    g = np.zeros((1, 1, 3, 3))
    g[0, 0, 1, 1] = np.nan
    with pytest.raises(InputError):
        dense_conv2d(g, ConvKernel.identity(1))


def test_upsample_and_centers():
    a = np.arange(4.0).reshape(1, 2, 2)
    np.testing.assert_array_equal(upsample_nearest(a)[0], [[0, 0, 1, 1], [0, 0, 1, 1], [2, 2, 3, 3], [2, 2, 3, 3]])
    cy, cx = cell_centers((10, 20, 30, 60), 4, 2)
    np.testing.assert_array_equal(cy[:, 0], [25, 35, 45, 55])
    np.testing.assert_array_equal(cx[0], [15, 25])
