"""Dense reference implementations of the refinement stages.

Two references are provided, both on plain [N_R, F, H, W] arrays:

* :func:`dense_stage_oracle` runs a stage at every cell of the upsampled grid
  (the dense-SFM style of head);
* :func:`sparse_on_dense_oracle` updates only the children of selected parents
  inside a fully materialised dense tensor and copies the rest.

Neither touches the SpsMap code path; they share only the parameter objects,
the bilinear kernel and the dense convolution.
"""

from dataclasses import dataclass

import numpy as np

from spsmask.config import N_REFINE_STAGES, PipelineConfig
from spsmask.errors import InputError
from spsmask.params import DTYPE, ConvKernel, DeformConvParams, MlpParams, SfmParams
from spsmask.pipeline import MaskStack, sigmoid, stage0
from spsmask.sps import top_k_cells
from spsmask.tensor import (
    box_size,
    dense_conv2d,
    level_select_initial,
    level_select_stage,
    sample_map,
    upsample_nearest,
)


def _cells_last(grid):
    return np.asarray(grid, dtype=DTYPE).transpose(0, 2, 3, 1)


def _channels_first(cells):
    return np.ascontiguousarray(cells.transpose(0, 3, 1, 2))


def _record(trace, **entry):
    if trace is not None:
        trace.append(entry)


# -- dense counterparts of the sparse ops -------------------------------------

def dense_mlp(grid, mlp):
    return _channels_first(mlp(_cells_last(grid)))


def dense_sfm(grid, params):
    out = sum(dense_conv2d(grid, k) for k in params.convs)
    return np.maximum(out, 0.0)


def dense_deform_conv(grid, params):
    """Deformable conv at every cell; offsets predicted from each cell's own feature."""
    n, f, h, w = grid.shape
    offsets = params.offset(_cells_last(grid)).reshape(n, h, w, 9, 2)
    ky, kx = np.meshgrid(np.arange(3) - 1.0, np.arange(3) - 1.0, indexing="ij")
    rows = np.arange(h)[:, None, None] + 0.5 + ky.ravel()[None, None, :] + offsets[..., 0]
    cols = np.arange(w)[None, :, None] + 0.5 + kx.ravel()[None, None, :] + offsets[..., 1]
    out = np.empty((n, params.f_out, h, w))
    wt = params.kernel.weight.reshape(params.f_out, f, 9)
    for r in range(n):
        samples = sample_map(grid[r], rows[r], cols[r])  # [h, w, 9, F]
        out[r] = np.einsum("hwtf,oft->ohw", samples, wt) + params.kernel.bias[:, None, None]
    return out


def dense_module(grid, module):
    if isinstance(module, SfmParams):
        return dense_sfm(grid, module)
    if isinstance(module, DeformConvParams):
        return dense_deform_conv(grid, module)
    if isinstance(module, ConvKernel):
        return dense_conv2d(grid, module)
    if isinstance(module, MlpParams):
        return dense_mlp(grid, module)
    raise InputError(f"unknown processing module {type(module).__name__}")


def backbone_grid(pyramid, boxes, stage, h, w):
    """Backbone features [N_R, C_B, h, w] sampled at every cell center of every RoI."""
    out = np.empty((len(boxes), pyramid.channels, h, w))
    for r, box in enumerate(boxes):
        bw, bh = box_size(box)
        level = level_select_stage(level_select_initial(bw, bh), stage)
        stride = 2.0**level
        cy = (box[1] + (np.arange(h) + 0.5) * bh / h) / stride
        cx = (box[0] + (np.arange(w) + 0.5) * bw / w) / stride
        yy, xx = np.meshgrid(cy, cx, indexing="ij")
        out[r] = sample_map(pyramid.levels[level], yy, xx).transpose(2, 0, 1)
    return out


def dense_fuse_backbone(grid, pyramid, boxes, stage, mlp, proj=None):
    n, f, h, w = grid.shape
    feats = _cells_last(backbone_grid(pyramid, boxes, stage, h, w))
    if proj is not None:
        feats = proj(feats)
    cells = _cells_last(grid)
    return grid + _channels_first(mlp(np.concatenate([cells, feats], axis=-1)))


def dense_children(grid, children):
    """x2 upsample where child (a, b) of every cell is produced by MLP ``2a + b``."""
    n, f, h, w = grid.shape
    cells = _cells_last(grid)
    out = np.empty((n, 2 * h, 2 * w, children[0].f_out))
    for a in (0, 1):
        for b in (0, 1):
            out[:, a::2, b::2, :] = children[2 * a + b](cells)
    return _channels_first(out)


# -- stage references ----------------------------------------------------------

@dataclass(frozen=True, eq=False)
class DenseStage:
    """Dense stage result; logits are NaN where ``active`` is False."""

    stage: int
    features: np.ndarray
    seg_logits: np.ndarray
    refine_logits: np.ndarray
    active: np.ndarray


def dense_stage_oracle(prev_features, s, pyramid, rois, weights, trace=None):
    """Run stage ``s`` at every cell of the x2 grid."""
    sw = weights.stages[s - 1]
    boxes = [r.box for r in rois]
    n, f, h, w = prev_features.shape
    parent_cells, cells = n * h * w, 4 * n * h * w
    x = dense_children(prev_features, sw.children)
    x = dense_fuse_backbone(x, pyramid, boxes, s, sw.backbone_mlp, sw.backbone_proj)
    x = dense_mlp(x, sw.halve)
    x = dense_module(x, sw.module)
    rows = _cells_last(x)
    seg = sw.seg(rows)[..., 0]
    ref = sw.refine(rows)[..., 0]
    if trace is not None:
        _trace_dense_stage(trace, s, sw, parent_cells, cells, pyramid.channels)
    return DenseStage(s, x, seg, ref, np.ones(seg.shape, bool))


def _trace_dense_stage(trace, s, sw, parent_cells, cells, channels):
    _record(trace, stage=s, name="active_set", kind="marker", sites=parent_cells,
            dense_sites=parent_cells)
    for c, mlp in enumerate(sw.children):
        _record(trace, stage=s, name=f"child{c}", kind="mlp", sites=parent_cells,
                dense_sites=parent_cells, dims=mlp.layer_dims())
    _record(trace, stage=s, name="backbone_sample", kind="sample", sites=cells,
            dense_sites=cells, channels=channels)
    if sw.backbone_proj is not None:
        _record(trace, stage=s, name="backbone_proj", kind="mlp", sites=cells,
                dense_sites=cells, dims=sw.backbone_proj.layer_dims())
    _record(trace, stage=s, name="backbone_fusion", kind="mlp", sites=cells,
            dense_sites=cells, dims=sw.backbone_mlp.layer_dims())
    _record(trace, stage=s, name="halve", kind="mlp", sites=cells, dense_sites=cells,
            dims=sw.halve.layer_dims())
    m = sw.module
    if isinstance(m, SfmParams):
        for k in m.convs:
            _record(trace, stage=s, name=f"module.sfm.d{k.dilation}", kind="conv3x3",
                    sites=cells, dense_sites=cells, f_in=k.f_in, f_out=k.f_out)
    elif isinstance(m, DeformConvParams):
        _record(trace, stage=s, name="module.deform", kind="deform", sites=cells,
                dense_sites=cells, f_in=m.f_in, f_out=m.f_out)
    elif isinstance(m, ConvKernel):
        _record(trace, stage=s, name="module.conv", kind="conv3x3", sites=cells,
                dense_sites=cells, f_in=m.f_in, f_out=m.f_out)
    else:
        _record(trace, stage=s, name="module.mlp", kind="mlp", sites=cells,
                dense_sites=cells, dims=m.layer_dims())
    for name, mlp in (("seg_head", sw.seg), ("refine_head", sw.refine)):
        _record(trace, stage=s, name=name, kind="mlp", sites=cells, dense_sites=cells,
                dims=mlp.layer_dims())


def _module_at(x, module, rr, ii, jj):
    """Evaluate a processing module only at cells (rr, ii, jj) of dense ``x``."""
    n, f, h, w = x.shape
    cells = _cells_last(x)
    if isinstance(module, MlpParams):
        return module(cells[rr, ii, jj])

    def conv_at(kernel):
        d = kernel.dilation
        padded = np.zeros((n, h + 2 * d, w + 2 * d, f))
        padded[:, d:d + h, d:d + w] = cells
        taps = [padded[rr, ii + d + dy, jj + d + dx] for dy, dx in kernel.taps()]
        return np.stack(taps, axis=1).reshape(len(rr), -1) @ kernel.tap_matrix().reshape(9 * f, -1) + kernel.bias

    if isinstance(module, ConvKernel):
        return conv_at(module)
    if isinstance(module, SfmParams):
        return np.maximum(sum(conv_at(k) for k in module.convs), 0.0)
    if isinstance(module, DeformConvParams):
        offsets = module.offset(cells[rr, ii, jj]).reshape(-1, 9, 2)
        ky, kx = np.meshgrid(np.arange(3) - 1.0, np.arange(3) - 1.0, indexing="ij")
        pr = ii[:, None] + 0.5 + ky.ravel()[None] + offsets[..., 0]
        pc = jj[:, None] + 0.5 + kx.ravel()[None] + offsets[..., 1]
        samples = np.empty((len(rr), 9, f))
        for r in np.unique(rr):
            sel = rr == r
            samples[sel] = sample_map(x[r], pr[sel], pc[sel])
        return samples.reshape(len(rr), -1) @ module.kernel.tap_matrix().reshape(9 * f, -1) + module.kernel.bias
    raise InputError(f"unknown processing module {type(module).__name__}")


def sparse_on_dense_oracle(prev_features, active_parents, s, pyramid, rois, weights):
    """Stage ``s`` computed only at children of ``active_parents`` inside a dense tensor."""
    sw = weights.stages[s - 1]
    boxes = [r.box for r in rois]
    prev_features = np.asarray(prev_features, dtype=DTYPE)
    active_parents = np.asarray(active_parents, bool)
    if active_parents.shape != (prev_features.shape[0],) + prev_features.shape[2:]:
        raise InputError("active mask must match the parent grid")
    n, f, h, w = prev_features.shape
    active = upsample_nearest(active_parents)
    rr, ii, jj = np.nonzero(active)

    x = upsample_nearest(prev_features).copy()
    if rr.size:
        kids = dense_children(prev_features, sw.children)
        x[rr, :, ii, jj] = kids[rr, :, ii, jj]
        feats = backbone_grid(pyramid, boxes, s, 2 * h, 2 * w)[rr, :, ii, jj]
        if sw.backbone_proj is not None:
            feats = sw.backbone_proj(feats)
        cur = x[rr, :, ii, jj]
        x[rr, :, ii, jj] = cur + sw.backbone_mlp(np.concatenate([cur, feats], axis=1))
    x = dense_mlp(x, sw.halve)
    seg = np.full(active.shape, np.nan)
    ref = np.full(active.shape, np.nan)
    if rr.size:
        upd = _module_at(x, sw.module, rr, ii, jj)
        x[rr, :, ii, jj] = upd
        seg[rr, ii, jj] = sw.seg(upd)[:, 0]
        ref[rr, ii, jj] = sw.refine(upd)[:, 0]
    return DenseStage(s, x, seg, ref, active)


# -- pipeline references -------------------------------------------------------

@dataclass(frozen=True, eq=False)
class OracleRun:
    stages: tuple
    masks: MaskStack


def dense_pipeline_oracle(pyramid, rois, weights, trace=None):
    """Dense head: every refinement stage predicts (and overwrites) every cell."""
    rois = list(rois)
    s0 = stage0(pyramid, rois, weights, trace)
    stages = [s0]
    masks = [sigmoid(s0.seg_logits)]
    x = s0.features
    for s in range(1, N_REFINE_STAGES + 1):
        st = dense_stage_oracle(x, s, pyramid, rois, weights, trace)
        stages.append(st)
        masks.append(sigmoid(st.seg_logits))
        x = st.features
    return OracleRun(tuple(stages), MaskStack(tuple(masks)))


def sparse_on_dense_pipeline(pyramid, rois, weights, config=None, score_fn=None):
    """Same selection rule as the sparse head, evaluated on dense tensors."""
    config = config or PipelineConfig()
    rois = list(rois)
    s0 = stage0(pyramid, rois, weights)
    stages = [s0]
    mask = sigmoid(s0.seg_logits)
    masks = [mask]
    refine_map = sigmoid(s0.refine_logits)
    x = s0.features
    for s in range(1, N_REFINE_STAGES + 1):
        scores = refine_map if score_fn is None else score_fn(s, refine_map.shape)
        k = refine_map.size if config.top_k is None else config.top_k
        parents = np.zeros(refine_map.size, bool)
        parents[top_k_cells(scores, k)] = True
        st = sparse_on_dense_oracle(x, parents.reshape(refine_map.shape), s, pyramid, rois, weights)
        stages.append(st)
        mask = upsample_nearest(mask).copy()
        mask[st.active] = sigmoid(st.seg_logits[st.active])
        masks.append(mask)
        refine_map = upsample_nearest(refine_map).copy()
        refine_map[st.active] = sigmoid(st.refine_logits[st.active])
        x = st.features
    return OracleRun(tuple(stages), MaskStack(tuple(masks)))
