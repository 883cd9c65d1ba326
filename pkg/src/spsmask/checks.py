"""Randomised sparse-vs-dense equivalence checks and invariant sweeps.

Used by the ``verify`` command and by the test-suite. Every check draws its
inputs from a ``numpy.random.Generator`` so a failing case is reproducible
from its seed alone.
"""

import numpy as np

from spsmask import oracle, sparse_ops
from spsmask.config import PipelineConfig
from spsmask.params import ConvKernel, DeformConvParams, MlpParams, SfmParams
from spsmask.pipeline import init_weights, run_pipeline
from spsmask.sps import (
    SpsMap,
    build_from_dense,
    scatter_update,
    to_dense,
    update_partition,
    upsample_split,
    validate,
)
from spsmask.tensor import FeaturePyramid, RoiDetection

RTOL = 1e-6
ATOL = 1e-12


def close(actual, expected, rtol=RTOL, atol=ATOL):
    actual = np.asarray(actual, float)
    expected = np.asarray(expected, float)
    if actual.shape != expected.shape:
        return False
    return bool(np.all(np.abs(actual - expected) <= rtol * np.maximum(np.abs(actual), np.abs(expected)) + atol))


def max_rel_err(actual, expected):
    actual = np.asarray(actual, float)
    expected = np.asarray(expected, float)
    scale = np.maximum(np.maximum(np.abs(actual), np.abs(expected)), ATOL / RTOL)
    return float((np.abs(actual - expected) / scale).max(initial=0.0))


# -- random inputs -------------------------------------------------------------

def _values(rng, shape, integer, lo=-3, hi=3):
    if integer:
        return rng.integers(lo, hi + 1, size=shape).astype(float)
    return rng.standard_normal(shape)


def random_mlp(rng, dims, integer=False):
    ws = tuple(_values(rng, (dims[i + 1], dims[i]), integer, -2, 2) for i in range(len(dims) - 1))
    bs = tuple(_values(rng, (d,), integer, -2, 2) for d in dims[1:])
    if not integer:
        ws = tuple(w / np.sqrt(w.shape[1]) for w in ws)
    return MlpParams(ws, bs)


def random_conv(rng, f_out, f_in, dilation=1, integer=False):
    w = _values(rng, (f_out, f_in, 3, 3), integer, -2, 2)
    if not integer:
        w = w / np.sqrt(9 * f_in)
    return ConvKernel(w, _values(rng, (f_out,), integer, -2, 2), dilation)


def random_sps(rng, max_rois=4, max_grid=28, max_f=32, integer=False):
    """A random valid SpsMap, optionally grown through upsampling and re-partitioning."""
    n = int(rng.integers(1, max_rois + 1))
    f = int(rng.integers(1, max_f // 2 + 1)) * 2
    n_up = int(rng.integers(0, 3))
    base = max(1, max_grid // 2**n_up)
    h, w = int(rng.integers(1, base + 1)), int(rng.integers(1, base + 1))
    dense = _values(rng, (n, f, h, w), integer)
    sps = build_from_dense(dense, rng.uniform(size=(n, h, w)), int(rng.integers(0, n * h * w + 1)))
    for _ in range(n_up):
        kids = [random_mlp(rng, (f, f, f), integer) for _ in range(4)]
        sps = upsample_split(sps, kids)
        if integer:
            sps = scatter_update(sps, np.clip(sps.active, -4, 4))
        k = int(rng.integers(0, sps.n_cells + 1))
        sps = update_partition(sps, rng.uniform(size=sps.grid_shape), k)
    return sps


def random_pyramid_and_boxes(rng, n_rois, grid_shape, channels, integer=False):
    """A 256 x 256 pyramid and boxes whose cell centers fall on half-pixel positions."""
    _, h, w = grid_shape
    image = (256, 256)
    if integer:
        levels = {k: rng.integers(-3, 4, size=(channels, -(-256 // 2**k), -(-256 // 2**k))).astype(float)
                  for k in range(2, 8)}
        pyramid = FeaturePyramid(image, levels)
    else:
        pyramid = FeaturePyramid.random(image, channels, rng)
    boxes = []
    for _ in range(n_rois):
        ch, cw = int(rng.integers(1, 5)), int(rng.integers(1, 5))
        bh, bw = min(h * ch, 250), min(w * cw, 250)
        y1 = int(rng.integers(0, 256 - bh + 1))
        x1 = int(rng.integers(0, 256 - bw + 1))
        boxes.append((float(x1), float(y1), float(x1 + bw), float(y1 + bh)))
    return pyramid, boxes


def _at_active(dense_out, sps):
    rois, rows, cols = sps.active_coords()
    return dense_out[rois, :, rows, cols]


# -- op-level checks -----------------------------------------------------------
# Each returns (ok, max_rel_err); integer instances must match exactly.

def _compare(sparse_rows, oracle_rows, integer):
    if integer:
        return bool(np.array_equal(sparse_rows, oracle_rows)), max_rel_err(sparse_rows, oracle_rows)
    return close(sparse_rows, oracle_rows), max_rel_err(sparse_rows, oracle_rows)


def _unchanged(before, after, passive_too=True):
    same_index = after.index is before.index or np.array_equal(after.index, before.index)
    same_passive = (not passive_too) or np.array_equal(after.passive, before.passive)
    return same_index and same_passive


def check_pointwise(rng, sps, integer=False):
    f = sps.n_features
    mlp = random_mlp(rng, (f, f, f), integer)
    out = sparse_ops.sparse_pointwise(sps, mlp)
    ok, err = _compare(out.active, _at_active(oracle.dense_mlp(to_dense(sps), mlp), sps), integer)
    return ok and _unchanged(sps, out), err


def check_conv(rng, sps, dilation, integer=False):
    f = sps.n_features
    kernel = random_conv(rng, f, f, dilation, integer)
    out = sparse_ops.sparse_conv3x3(sps, kernel)
    from spsmask.tensor import dense_conv2d

    ok, err = _compare(out.active, _at_active(dense_conv2d(to_dense(sps), kernel), sps), integer)
    return ok and _unchanged(sps, out), err


def check_deform(rng, sps, integer=False):
    f = sps.n_features
    kernel = random_conv(rng, f, f, 1, integer)
    if integer:
        offset = MlpParams.linear(np.zeros((18, f)), rng.integers(-2, 3, size=18).astype(float))
    else:
        offset = MlpParams.linear(rng.standard_normal((18, f)) / np.sqrt(f), rng.standard_normal(18))
    params = DeformConvParams(kernel, offset)
    out = sparse_ops.sparse_deform_conv(sps, params)
    ok, err = _compare(out.active, _at_active(oracle.dense_deform_conv(to_dense(sps), params), sps), integer)
    return ok and _unchanged(sps, out), err


def check_sfm(rng, sps, integer=False):
    f = sps.n_features
    params = SfmParams(tuple(random_conv(rng, f, f, d, integer) for d in (1, 3, 5)))
    out = sparse_ops.sfm(sps, params)
    ok, err = _compare(out.active, _at_active(oracle.dense_sfm(to_dense(sps), params), sps), integer)
    return ok and _unchanged(sps, out), err


def check_halve(rng, sps, integer=False):
    f = sps.n_features
    mlp = random_mlp(rng, (f, f // 2), integer)
    out = sparse_ops.halve_features(sps, mlp)
    ok, err = _compare(to_dense(out), oracle.dense_mlp(to_dense(sps), mlp), integer)
    return ok and _unchanged(sps, out, passive_too=False), err


def check_fuse_backbone(rng, sps, integer=False):
    f = sps.n_features
    n = sps.grid_shape[0]
    channels = int(rng.integers(1, 9))
    pyramid, boxes = random_pyramid_and_boxes(rng, n, sps.grid_shape, channels, integer)
    stage = int(rng.integers(1, 4))
    mlp = random_mlp(rng, (f + channels, f, f), integer)
    out = sparse_ops.fuse_backbone(sps, pyramid, boxes, stage, mlp)
    expect = oracle.dense_fuse_backbone(to_dense(sps), pyramid, boxes, stage, mlp)
    ok, err = _compare(out.active, _at_active(expect, sps), integer)
    return ok and _unchanged(sps, out), err


OP_CHECKS = {
    "sparse_pointwise": check_pointwise,
    "sparse_conv3x3[d=1]": lambda rng, sps, integer=False: check_conv(rng, sps, 1, integer),
    "sparse_conv3x3[d=3]": lambda rng, sps, integer=False: check_conv(rng, sps, 3, integer),
    "sparse_conv3x3[d=5]": lambda rng, sps, integer=False: check_conv(rng, sps, 5, integer),
    "sparse_deform_conv": check_deform,
    "sfm": check_sfm,
    "halve_features": check_halve,
    "fuse_backbone": check_fuse_backbone,
}


# -- pipeline-level check ------------------------------------------------------

def small_pipeline_case(rng, module=None, feature_size=16, all_active=False):
    """Random small-scale head, scene and config for end-to-end cross-checks."""
    module = module or ("mlp", "conv", "deform", "sfm")[int(rng.integers(0, 4))]
    n = int(rng.integers(1, 4))
    channels = feature_size
    cfg = PipelineConfig(
        top_k=None if all_active else int(rng.integers(0, n * 14 * 14 + 1)),
        module=module, feature_size=feature_size, backbone_channels=channels,
        seed=int(rng.integers(0, 2**31)), init_scale=0.3,
        backbone_reduce=bool(rng.integers(0, 2)),
    )
    pyramid = FeaturePyramid.random((128, 128), channels, rng)
    rois = []
    for _ in range(n):
        x1, y1 = rng.uniform(0, 64, size=2)
        bw, bh = rng.uniform(8, 64, size=2)
        rois.append(RoiDetection((x1, y1, x1 + bw, y1 + bh), float(rng.uniform()),
                                 rng.standard_normal(feature_size)))
    return cfg, pyramid, rois, init_weights(cfg)


def check_pipeline(rng):
    """Sparse head vs the sparse-on-dense reference: features and masks at every cell."""
    cfg, pyramid, rois, weights = small_pipeline_case(rng)
    sparse = run_pipeline(pyramid, rois, weights, cfg, paste=False)
    ref = oracle.sparse_on_dense_pipeline(pyramid, rois, weights, cfg)
    ok, err = True, 0.0
    for s in range(1, 4):
        for a, b in ((to_dense(sparse.stages[s].features), ref.stages[s].features),
                     (sparse.masks.masks[s], ref.masks.masks[s])):
            ok &= close(a, b)
            err = max(err, max_rel_err(a, b))
        validate(sparse.stages[s].features)
    return ok, err


# -- invariant sweeps ----------------------------------------------------------

def random_operation(rng, sps):
    """Apply one randomly chosen SpsMap operation; returns (name, new_map)."""
    f = sps.n_features
    choices = ["update_partition", "scatter_update", "pointwise", "conv", "deform", "sfm"]
    if sps.n_cells <= 1024:
        choices.append("upsample_split")
    if f % 2 == 0 and f > 2:
        choices.append("halve")
    op = choices[int(rng.integers(0, len(choices)))]
    if op == "update_partition":
        return op, update_partition(sps, rng.uniform(size=sps.grid_shape), int(rng.integers(0, sps.n_cells + 1)))
    if op == "upsample_split":
        return op, upsample_split(sps, [random_mlp(rng, (f, f, f)) for _ in range(4)])
    if op == "scatter_update":
        return op, scatter_update(sps, rng.standard_normal((sps.n_active, f)))
    if op == "pointwise":
        return op, sparse_ops.sparse_pointwise(sps, random_mlp(rng, (f, f)))
    if op == "conv":
        return op, sparse_ops.sparse_conv3x3(sps, random_conv(rng, f, f, int(rng.choice([1, 3, 5]))))
    if op == "deform":
        kernel = random_conv(rng, f, f)
        offset = MlpParams.linear(rng.standard_normal((18, f)) * 0.3, rng.standard_normal(18))
        return op, sparse_ops.sparse_deform_conv(sps, DeformConvParams(kernel, offset))
    if op == "sfm":
        return op, sparse_ops.sfm(sps, SfmParams(tuple(random_conv(rng, f, f, d) for d in (1, 3, 5))))
    return op, sparse_ops.halve_features(sps, random_mlp(rng, (f, f // 2)))


def corrupt_index(sps):
    """Test hook: point a second cell at active row 0 (breaks active uniqueness)."""
    index = sps.index.copy()
    flat = index.reshape(-1)
    if sps.n_active == 0 or flat.size < 2:
        flat[0] = sps.pad_index  # out of range instead
    else:
        other = np.flatnonzero(flat != 0)[0]
        flat[other] = 0
    return SpsMap(sps.active, sps.passive, index, sps.stage)


def check_sequence(rng, length=6, inject_fault=False):
    """Validate after every step of a random op sequence; returns the op names."""
    sps = random_sps(rng, max_grid=14, max_f=16)
    validate(sps)
    names = []
    for _ in range(length):
        name, sps = random_operation(rng, sps)
        names.append(name)
        validate(sps)
    if inject_fault:
        validate(corrupt_index(sps))
    return names
