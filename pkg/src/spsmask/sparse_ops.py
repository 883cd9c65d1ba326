"""2D operations evaluated only at the active cells of an SpsMap.

Every op reads neighbours through the index map (so passive and padding
features are visible) and writes back through a single scatter of the active
rows. Index maps and passive rows are left untouched, except by
:func:`halve_features` which projects both feature matrices.
"""

import numpy as np

from spsmask.errors import InputError
from spsmask.params import DTYPE, ConvKernel, DeformConvParams, MlpParams, SfmParams
from spsmask.sps import SpsMap, gather_points, neighbor_indices, scatter_update
from spsmask.tensor import cell_centers, level_select_initial, level_select_stage, box_size, sample_map

NO_TRACE = None


def _record(trace, **entry):
    if trace is not None:
        trace.append(entry)


def _check_f(f_in, f, what):
    if f_in != f:
        raise InputError(f"{what} expects feature size {f_in}, map has {f}")


def sparse_pointwise(sps, mlp, trace=NO_TRACE, stage=None, name="pointwise"):
    _check_f(mlp.f_in, sps.n_features, "pointwise MLP")
    _record(trace, stage=stage, name=name, kind="mlp", sites=sps.n_active,
            dense_sites=sps.n_cells, dims=mlp.layer_dims())
    return scatter_update(sps, mlp(sps.active))


def conv_patches(sps, kernel, table=None):
    """Gathered [N_A, 9, F] neighbourhoods of all active cells at the kernel's dilation."""
    if table is None:
        table = sps.table()
    rois, rows, cols = sps.active_coords()
    idx = neighbor_indices(sps, rois, rows, cols, kernel.taps())
    return table[idx]


def _conv_active(sps, kernel, table=None):
    _check_f(kernel.f_in, sps.n_features, "conv kernel")
    if sps.n_active == 0:
        return np.zeros((0, kernel.f_out), DTYPE)
    return kernel.contract(conv_patches(sps, kernel, table))


def sparse_conv3x3(sps, kernel, trace=NO_TRACE, stage=None, name="conv"):
    out = _conv_active(sps, kernel)
    _record(trace, stage=stage, name=name, kind="conv3x3", sites=sps.n_active,
            dense_sites=sps.n_cells, f_in=kernel.f_in, f_out=kernel.f_out)
    return scatter_update(sps, out)


def deform_points(rows, cols, offsets):
    """Sampling points [N, 9] for cells (rows, cols) given predicted offsets [N, 18]."""
    taps = np.array([(ky - 1, kx - 1) for ky in range(3) for kx in range(3)], dtype=DTYPE)
    off = offsets.reshape(-1, 9, 2)
    pr = np.asarray(rows, DTYPE)[:, None] + 0.5 + taps[None, :, 0] + off[:, :, 0]
    pc = np.asarray(cols, DTYPE)[:, None] + 0.5 + taps[None, :, 1] + off[:, :, 1]
    return pr, pc


def sparse_deform_conv(sps, params, trace=NO_TRACE, stage=None, name="deform"):
    _check_f(params.f_in, sps.n_features, "deformable conv")
    _record(trace, stage=stage, name=name, kind="deform", sites=sps.n_active,
            dense_sites=sps.n_cells, f_in=params.f_in, f_out=params.f_out)
    if sps.n_active == 0:
        return scatter_update(sps, np.zeros((0, params.f_out), DTYPE))
    offsets = params.offset(sps.active)
    rois, rows, cols = sps.active_coords()
    pr, pc = deform_points(rows, cols, offsets)
    patches = gather_points(sps, rois[:, None], pr, pc)
    return scatter_update(sps, params.kernel.contract(patches))


def sfm(sps, params, trace=NO_TRACE, stage=None, name="sfm"):
    """Sum of three dilated convs over the same input, then ReLU."""
    table = sps.table()
    outs = [_conv_active(sps, k, table) for k in params.convs]
    for k in params.convs:
        _record(trace, stage=stage, name=f"{name}.d{k.dilation}", kind="conv3x3",
                sites=sps.n_active, dense_sites=sps.n_cells, f_in=k.f_in, f_out=k.f_out)
    return scatter_update(sps, np.maximum(outs[0] + outs[1] + outs[2], 0.0))


def apply_module(sps, module, trace=NO_TRACE, stage=None):
    """Dispatch a processing module (MLP, conv, deformable conv or SFM)."""
    if isinstance(module, SfmParams):
        return sfm(sps, module, trace, stage, name="module.sfm")
    if isinstance(module, DeformConvParams):
        return sparse_deform_conv(sps, module, trace, stage, name="module.deform")
    if isinstance(module, ConvKernel):
        return sparse_conv3x3(sps, module, trace, stage, name="module.conv")
    if isinstance(module, MlpParams):
        return sparse_pointwise(sps, module, trace, stage, name="module.mlp")
    raise InputError(f"unknown processing module {type(module).__name__}")


def fuse_query(grid, queries, mlp, trace=NO_TRACE, stage=0):
    """Residual per-cell fusion of each RoI's query vector into its feature grid."""
    grid = np.asarray(grid, dtype=DTYPE)
    queries = np.asarray(queries, dtype=DTYPE)
    n, f, h, w = grid.shape
    if queries.shape != (n, f):
        raise InputError(f"queries must be [{n}, {f}] to match the grid, got {queries.shape}")
    if mlp.f_in != 2 * f or mlp.f_out != f:
        raise InputError(f"query MLP must map {2 * f} -> {f}, got {mlp.f_in} -> {mlp.f_out}")
    cells = grid.transpose(0, 2, 3, 1)
    q = np.broadcast_to(queries[:, None, None, :], cells.shape)
    delta = mlp(np.concatenate([cells, q], axis=-1))
    _record(trace, stage=stage, name="query_fusion", kind="mlp", sites=n * h * w,
            dense_sites=n * h * w, dims=mlp.layer_dims())
    return grid + delta.transpose(0, 3, 1, 2)


def backbone_points(box, level, h, w, rows, cols):
    """Level coordinates of the centers of cells (rows, cols) on an h x w RoI grid."""
    cy, cx = cell_centers(box, h, w)
    stride = 2.0**level
    return cy[rows, cols] / stride, cx[rows, cols] / stride


def sample_backbone(pyramid, boxes, stage, grid_shape, rois, rows, cols):
    """Backbone features [N, C_B] at the centers of the given cells."""
    n, h, w = grid_shape
    out = np.zeros((len(rois), pyramid.channels), DTYPE)
    for r in np.unique(rois):
        sel = np.flatnonzero(rois == r)
        bw, bh = box_size(boxes[r])
        level = level_select_stage(level_select_initial(bw, bh), stage)
        py, px = backbone_points(boxes[r], level, h, w, rows[sel], cols[sel])
        out[sel] = sample_map(pyramid.levels[level], py, px)
    return out


def fuse_backbone(sps, pyramid, boxes, stage, mlp, proj=None, trace=NO_TRACE):
    """Residual fusion of backbone features sampled at active cell centers.

    ``proj`` optionally maps the sampled C_B features down before concatenation.
    """
    f = sps.n_features
    c_b = pyramid.channels if proj is None else proj.f_out
    if proj is not None:
        _check_f(proj.f_in, pyramid.channels, "backbone projection")
    if len(boxes) != sps.grid_shape[0]:
        raise InputError(f"{len(boxes)} boxes for {sps.grid_shape[0]} RoIs")
    if mlp.f_in != f + c_b or mlp.f_out != f:
        raise InputError(
            f"backbone MLP must map {f + c_b} -> {f}, got {mlp.f_in} -> {mlp.f_out}"
        )
    _record(trace, stage=stage, name="backbone_sample", kind="sample", sites=sps.n_active,
            dense_sites=sps.n_cells, channels=pyramid.channels)
    if proj is not None:
        _record(trace, stage=stage, name="backbone_proj", kind="mlp", sites=sps.n_active,
                dense_sites=sps.n_cells, dims=proj.layer_dims())
    _record(trace, stage=stage, name="backbone_fusion", kind="mlp", sites=sps.n_active,
            dense_sites=sps.n_cells, dims=mlp.layer_dims())
    if sps.n_active == 0:
        return sps
    rois, rows, cols = sps.active_coords()
    feats = sample_backbone(pyramid, boxes, stage, sps.grid_shape, rois, rows, cols)
    if proj is not None:
        feats = proj(feats)
    delta = mlp(np.concatenate([sps.active, feats], axis=1))
    return scatter_update(sps, sps.active + delta)


def halve_features(sps, mlp, trace=NO_TRACE, stage=None):
    """Project active and passive rows through one shared linear layer F -> F/2."""
    f = sps.n_features
    if f % 2:
        raise InputError(f"feature size {f} is odd and cannot be halved")
    if mlp.n_layers != 1 or mlp.f_in != f or mlp.f_out != f // 2:
        raise InputError(
            f"halving MLP must be one layer {f} -> {f // 2}, got {mlp.layer_dims()}"
        )
    _record(trace, stage=stage, name="halve", kind="mlp",
            sites=sps.n_active + sps.n_passive, dense_sites=sps.n_cells, dims=mlp.layer_dims())
    return SpsMap(mlp(sps.active), mlp(sps.passive), sps.index, sps.stage)
