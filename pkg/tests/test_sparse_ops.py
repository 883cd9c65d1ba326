import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spsmask import checks
from spsmask.config import PipelineConfig
from spsmask.errors import InputError
from spsmask.params import ConvKernel, DeformConvParams, MlpParams, SfmParams
from spsmask.sparse_ops import (
    fuse_backbone,
    fuse_query,
    halve_features,
    sfm,
    sparse_conv3x3,
    sparse_deform_conv,
    sparse_pointwise,
)
from spsmask.sps import SpsMap, gather_neighborhood, to_dense
from spsmask.tensor import FeaturePyramid, bilinear_sample, level_select_initial, level_select_stage


def toy_map():
    index = np.array([[[0, 5, 1], [5, 4, 6], [2, 6, 3]]])
    return SpsMap(np.arange(1.0, 5.0)[:, None], np.array([[10.0], [20.0], [30.0]]), index, 1)


@pytest.mark.parametrize("name", list(checks.OP_CHECKS))
@pytest.mark.parametrize("integer", [False, True])
def test_op_matches_dense_oracle(name, integer):
    for seed in range(15):
        rng = np.random.default_rng([seed, 99])
        sps = checks.random_sps(rng, integer=integer)
        ok, err = checks.OP_CHECKS[name](rng, sps, integer)
        assert ok, f"seed {seed}: max rel err {err}"


# -- pointwise --------------------------------------------------------------------

def test_pointwise_identity(rng):
    sps = checks.random_sps(rng)
    out = sparse_pointwise(sps, MlpParams.identity(sps.n_features))
    np.testing.assert_array_equal(out.active, sps.active)
    assert out.index is sps.index and out.passive is sps.passive


def test_pointwise_zero_weights_bias():
    sps = SpsMap(np.ones((3, 2)), np.ones((1, 2)), np.array([[[0, 1], [2, 3]]]))
    out = sparse_pointwise(sps, MlpParams.zeros((2, 4, 2), bias=[1.5, -2.0]))
    np.testing.assert_array_equal(out.active, np.tile([1.5, -2.0], (3, 1)))
    np.testing.assert_array_equal(out.passive, sps.passive)


def test_pointwise_dim_mismatch():
    with pytest.raises(InputError):
        sparse_pointwise(toy_map(), MlpParams.identity(2))


# -- conv -------------------------------------------------------------------------

def test_conv_center_identity(rng):
    sps = checks.random_sps(rng)
    for d in (1, 3, 5):
        out = sparse_conv3x3(sps, ConvKernel.identity(sps.n_features, d))
        np.testing.assert_array_equal(out.active, sps.active)


def test_conv_toy_hand_sums():
    out = sparse_conv3x3(toy_map(), ConvKernel(np.ones((1, 1, 3, 3)), np.zeros(1)))
    # dense view [[1,20,2],[20,10,30],[3,30,4]]; corners see 4 in-bounds cells
    np.testing.assert_array_equal(out.active[:, 0], [51, 62, 63, 74])


def test_conv_dim_mismatch():
    with pytest.raises(InputError):
        sparse_conv3x3(toy_map(), ConvKernel.identity(2))


# -- deformable -------------------------------------------------------------------

def test_deform_zero_offsets_is_conv(rng):
    sps = checks.random_sps(rng)
    f = sps.n_features
    kernel = checks.random_conv(rng, f, f)
    params = DeformConvParams(kernel, MlpParams.zeros((f, 18)))
    np.testing.assert_array_equal(sparse_deform_conv(sps, params).active, sparse_conv3x3(sps, kernel).active)


def test_deform_constant_shift(rng):
    sps = checks.random_sps(rng, integer=True)
    f = sps.n_features
    kernel = checks.random_conv(rng, f, f, integer=True)
    bias = np.zeros(18)
    bias[0::2] = 1.0  # every tap moves one row down
    out = sparse_deform_conv(sps, DeformConvParams(kernel, MlpParams.zeros((f, 18), bias=bias)))
    shifted = [(dy + 1, dx) for dy, dx in kernel.taps()]
    rois, rows, cols = sps.active_coords()
    for a in range(sps.n_active):
        patch = gather_neighborhood(sps, (rois[a], rows[a], cols[a]), shifted)
        np.testing.assert_array_equal(out.active[a], kernel.contract(patch[None])[0])


def test_deform_offset_shape_checked():
    with pytest.raises(InputError):
        DeformConvParams(ConvKernel.identity(2), MlpParams.zeros((2, 16)))
    with pytest.raises(InputError):
        DeformConvParams(ConvKernel.identity(2, dilation=3), MlpParams.zeros((2, 18)))


# -- sfm --------------------------------------------------------------------------

def test_sfm_zero():
    sps = toy_map()
    params = SfmParams(tuple(ConvKernel.zeros(1, 1, d) for d in (1, 3, 5)))
    np.testing.assert_array_equal(sfm(sps, params).active, np.zeros((4, 1)))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from([0, 1, 2]))
def test_sfm_additive(seed, keep):
    rng = np.random.default_rng(seed)
    sps = checks.random_sps(rng, max_grid=12, max_f=8)
    f = sps.n_features
    convs = [ConvKernel.zeros(f, f, d) for d in (1, 3, 5)]
    convs[keep] = checks.random_conv(rng, f, f, (1, 3, 5)[keep])
    out = sfm(sps, SfmParams(tuple(convs)))
    np.testing.assert_allclose(out.active, np.maximum(sparse_conv3x3(sps, convs[keep]).active, 0), rtol=1e-12)
    assert out.index is sps.index and out.passive is sps.passive


def test_sfm_requires_dilations():
    with pytest.raises(InputError):
        SfmParams(tuple(ConvKernel.zeros(1, 1, d) for d in (1, 2, 5)))


# -- query fusion -----------------------------------------------------------------

def test_fuse_query_zero_mlp(rng):
    grid = rng.standard_normal((2, 4, 3, 3))
    out = fuse_query(grid, rng.standard_normal((2, 4)), MlpParams.zeros((8, 4, 4)))
    np.testing.assert_array_equal(out, grid)


def test_fuse_query_passes_query(rng):
    f = 3
    grid = rng.standard_normal((2, f, 4, 5))
    q = rng.standard_normal((2, f))
    eye, zero = np.eye(f), np.zeros((f, f))
    w1 = np.block([[zero, eye], [zero, -eye]])
    w2 = np.hstack([eye, -eye])
    mlp = MlpParams((w1, w2), (np.zeros(2 * f), np.zeros(f)))
    out = fuse_query(grid, q, mlp)
    np.testing.assert_allclose(out, grid + q[:, :, None, None], rtol=1e-12)


def test_fuse_query_loop_oracle(rng):
    grid = rng.standard_normal((2, 4, 3, 5))
    q = rng.standard_normal((2, 4))
    mlp = checks.random_mlp(rng, (8, 4, 4))
    out = fuse_query(grid, q, mlp)
    for r in range(2):
        for i in range(3):
            for j in range(5):
                x = np.concatenate([grid[r, :, i, j], q[r]])
                h = np.maximum(mlp.weights[0] @ x + mlp.biases[0], 0)
                expect = grid[r, :, i, j] + mlp.weights[1] @ h + mlp.biases[1]
                np.testing.assert_allclose(out[r, :, i, j], expect, rtol=1e-6, atol=1e-12)


def test_fuse_query_dim_mismatch(rng):
    with pytest.raises(InputError):
        fuse_query(np.zeros((1, 4, 2, 2)), np.zeros((1, 3)), MlpParams.zeros((8, 4, 4)))
    with pytest.raises(InputError):
        fuse_query(np.zeros((1, 4, 2, 2)), np.zeros((1, 4)), MlpParams.zeros((4, 4)))


# -- backbone fusion --------------------------------------------------------------

def passthrough_mlp(f):
    """Two-layer MLP returning the backbone half of its (F + F) input."""
    w1 = np.hstack([np.zeros((f, f)), np.eye(f)])
    w1 = np.vstack([w1, -w1])
    w2 = np.hstack([np.eye(f), -np.eye(f)])
    return MlpParams((w1, w2), (np.zeros(2 * f), np.zeros(f)))


def test_fuse_backbone_zero_mlp(rng):
    sps = checks.random_sps(rng, max_rois=2)
    pyramid, boxes = checks.random_pyramid_and_boxes(rng, sps.grid_shape[0], sps.grid_shape, 3)
    out = fuse_backbone(sps, pyramid, boxes, 1, MlpParams.zeros((sps.n_features + 3, 4, sps.n_features)))
    np.testing.assert_array_equal(out.active, sps.active)


def test_fuse_backbone_constant_shift():
    f = 2
    sps = checks.random_sps(np.random.default_rng(5), max_rois=1, max_grid=8, max_f=2)
    pyramid = FeaturePyramid.constant((256, 256), f, 0.75)
    box = [(64.0, 64.0, 192.0, 192.0)]  # far from the image border at every level
    out = fuse_backbone(sps, pyramid, box, 2, passthrough_mlp(f))
    np.testing.assert_allclose(out.active - sps.active, 0.75, rtol=1e-12)


def test_fuse_backbone_per_cell_oracle(rng):
    for stage in (1, 2, 3):
        sps = checks.random_sps(rng, max_rois=3, max_f=8)
        c = 5
        pyramid, boxes = checks.random_pyramid_and_boxes(rng, sps.grid_shape[0], sps.grid_shape, c)
        mlp = checks.random_mlp(rng, (sps.n_features + c, 6, sps.n_features))
        out = fuse_backbone(sps, pyramid, boxes, stage, mlp)
        n, h, w = sps.grid_shape
        rois, rows, cols = sps.active_coords()
        for a in range(sps.n_active):
            x1, y1, x2, y2 = boxes[rois[a]]
            level = level_select_stage(level_select_initial(x2 - x1, y2 - y1), stage)
            s = 2.0**level
            cy = y1 + (rows[a] + 0.5) / h * (y2 - y1)
            cx = x1 + (cols[a] + 0.5) / w * (x2 - x1)
            feat = bilinear_sample(pyramid.levels[level][None], 0, (cy / s, cx / s))
            expect = sps.active[a] + mlp(np.concatenate([sps.active[a], feat]))
            np.testing.assert_allclose(out.active[a], expect, rtol=1e-6, atol=1e-12)


def test_fuse_backbone_dim_mismatch(rng):
    sps = toy_map()
    pyramid = FeaturePyramid.constant((64, 64), 2, 1.0)
    with pytest.raises(InputError):
        fuse_backbone(sps, pyramid, [(0, 0, 8, 8)], 1, MlpParams.zeros((2, 1)))
    with pytest.raises(InputError):
        fuse_backbone(sps, pyramid, [(0, 0, 8, 8)] * 2, 1, MlpParams.zeros((3, 1)))


# -- halving ----------------------------------------------------------------------

def test_halve_projection():
    sps = SpsMap(np.array([[1.0, 2.0]]), np.array([[3.0, 4.0]]), np.array([[[0, 1]]]))
    out = halve_features(sps, MlpParams.linear(np.array([[1.0, 0.0]])))
    np.testing.assert_array_equal(to_dense(out)[0, 0], [[1.0, 3.0]])
    assert out.index is sps.index


def test_halve_rejects_bad_sizes():
    with pytest.raises(InputError):
        halve_features(toy_map(), MlpParams.zeros((1, 1)))
    sps = SpsMap(np.ones((1, 4)), np.zeros((0, 4)), np.array([[[0]]]))
    with pytest.raises(InputError):
        halve_features(sps, MlpParams.zeros((4, 3)))
    with pytest.raises(InputError):
        halve_features(sps, MlpParams.zeros((4, 4, 2)))


def test_feature_chain():
    cfg = PipelineConfig()
    assert [cfg.stage_features(s) for s in range(4)] == [256, 128, 64, 32]
