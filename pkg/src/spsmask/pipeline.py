"""Multi-stage mask head: a dense 14x14 stage followed by three sparse x2 refinements.

Stage 0 works on a dense [N_R, F_0, 14, 14] grid. Each refinement stage
selects the top-K parent cells by refinement score, splits them into four
children, fuses backbone features at the children's centers, halves the
feature size, runs the processing module and predicts new mask and refinement
logits on the active children only. Masks are assembled by upsampling the
previous mask and overwriting the children of selected parents.
"""

from dataclasses import dataclass, replace

import numpy as np

from spsmask import sparse_ops
from spsmask.config import N_REFINE_STAGES, ROI_GRID, PipelineConfig
from spsmask.errors import InputError
from spsmask.params import (
    ConvKernel,
    DeformConvParams,
    MlpParams,
    SfmParams,
    conv_from_tensors,
    deform_from_tensors,
    flatten_params,
    mlp_from_tensors,
    sfm_from_tensors,
)
from spsmask.sps import build_from_dense, update_partition, upsample_split
from spsmask.tensor import box_size, dense_conv2d, roi_align_all, sample_map, upsample_nearest

MASK_SIZES = (14, 28, 56, 112)


def sigmoid(x):
    x = np.asarray(x, dtype=float)
    return np.exp(-np.logaddexp(0.0, -x))


# -- weights -------------------------------------------------------------------

@dataclass(frozen=True)
class StageWeights:
    children: tuple          # 4 x MLP F_{s-1} -> F_{s-1}
    backbone_mlp: MlpParams  # (F_{s-1} + C) -> F_{s-1}
    halve: MlpParams         # one layer F_{s-1} -> F_s
    module: object           # MlpParams | ConvKernel | DeformConvParams | SfmParams
    seg: MlpParams           # F_s -> 1
    refine: MlpParams        # F_s -> 1
    backbone_proj: MlpParams | None = None  # C_B -> F_{s-1} when backbone_reduce


@dataclass(frozen=True)
class PipelineWeights:
    query_mlp: MlpParams
    fcn: tuple
    seg: MlpParams
    refine: MlpParams
    stages: tuple

    def tensors(self):
        out = {}
        out.update(flatten_params(self.query_mlp, "query_mlp"))
        for i, k in enumerate(self.fcn):
            out.update(flatten_params(k, f"fcn.{i}"))
        out.update(flatten_params(self.seg, "stage0.seg"))
        out.update(flatten_params(self.refine, "stage0.refine"))
        for s, sw in enumerate(self.stages, 1):
            p = f"stage{s}"
            for c, mlp in enumerate(sw.children):
                out.update(flatten_params(mlp, f"{p}.child{c}"))
            out.update(flatten_params(sw.backbone_mlp, f"{p}.backbone"))
            if sw.backbone_proj is not None:
                out.update(flatten_params(sw.backbone_proj, f"{p}.backbone_proj"))
            out.update(flatten_params(sw.halve, f"{p}.halve"))
            out.update(flatten_params(sw.module, f"{p}.module"))
            out.update(flatten_params(sw.seg, f"{p}.seg"))
            out.update(flatten_params(sw.refine, f"{p}.refine"))
        return out


def _module_from_tensors(tensors, prefix, kind):
    if kind == "sfm":
        return sfm_from_tensors(tensors, prefix)
    if kind == "deform":
        return deform_from_tensors(tensors, prefix)
    if kind == "conv":
        return conv_from_tensors(tensors, prefix)
    return mlp_from_tensors(tensors, prefix)


def weights_from_tensors(tensors, config):
    """Rebuild weights from a flat tensor dict, checking every shape against ``config``."""
    template = init_weights(config, zero=True).tensors()
    for name, arr in template.items():
        if name not in tensors:
            raise InputError(f"weights are missing tensor '{name}' required by the config")
        got = np.shape(tensors[name])
        if got != arr.shape:
            raise InputError(
                f"weights tensor '{name}' has shape {got}, config expects {arr.shape} "
                f"(feature_size={config.feature_size}, backbone_channels="
                f"{config.backbone_channels}, module={config.module!r})"
            )
    extra = sorted(set(tensors) - set(template))
    if extra:
        raise InputError(f"weights contain tensors unused by the config: {extra[:5]}")
    t = tensors
    stages = []
    for s in range(1, N_REFINE_STAGES + 1):
        p = f"stage{s}"
        stages.append(StageWeights(
            children=tuple(mlp_from_tensors(t, f"{p}.child{c}") for c in range(4)),
            backbone_mlp=mlp_from_tensors(t, f"{p}.backbone"),
            halve=mlp_from_tensors(t, f"{p}.halve"),
            module=_module_from_tensors(t, f"{p}.module", config.module),
            seg=mlp_from_tensors(t, f"{p}.seg"),
            refine=mlp_from_tensors(t, f"{p}.refine"),
            backbone_proj=mlp_from_tensors(t, f"{p}.backbone_proj") if config.backbone_reduce else None,
        ))
    return PipelineWeights(
        query_mlp=mlp_from_tensors(t, "query_mlp"),
        fcn=tuple(conv_from_tensors(t, f"fcn.{i}") for i in range(4)),
        seg=mlp_from_tensors(t, "stage0.seg"),
        refine=mlp_from_tensors(t, "stage0.refine"),
        stages=tuple(stages),
    )


class _Init:
    def __init__(self, rng, scale, zero):
        self.rng, self.scale, self.zero = rng, scale, zero

    def array(self, shape):
        if self.zero:
            return np.zeros(shape)
        return self.rng.uniform(-self.scale, self.scale, size=shape)

    def mlp(self, *dims):
        ws = tuple(self.array((dims[i + 1], dims[i])) for i in range(len(dims) - 1))
        bs = tuple(self.array((d,)) for d in dims[1:])
        return MlpParams(ws, bs)

    def conv(self, f_out, f_in, dilation=1):
        return ConvKernel(self.array((f_out, f_in, 3, 3)), self.array((f_out,)), dilation)


def init_weights(config=None, zero=False):
    """Seeded uniform(-init_scale, init_scale) weights (or all zeros) for ``config``."""
    config = config or PipelineConfig()
    init = _Init(np.random.default_rng(config.seed), config.init_scale, zero)
    f0, cb = config.feature_size, config.backbone_channels
    query = init.mlp(2 * f0, f0, f0)
    fcn = tuple(init.conv(f0, f0) for _ in range(4))
    seg0 = init.mlp(f0, f0, 1)
    ref0 = init.mlp(f0, f0, 1)
    stages = []
    for s in range(1, N_REFINE_STAGES + 1):
        fp, fs = config.stage_features(s - 1), config.stage_features(s)
        children = tuple(init.mlp(fp, fp, fp) for _ in range(4))
        proj = init.mlp(cb, fp) if config.backbone_reduce else None
        fuse_in = fp + (fp if config.backbone_reduce else cb)
        backbone = init.mlp(fuse_in, fp, fp)
        halve = init.mlp(fp, fs)
        if config.module == "sfm":
            module = SfmParams(tuple(init.conv(fs, fs, d) for d in (1, 3, 5)))
        elif config.module == "deform":
            module = DeformConvParams(init.conv(fs, fs), init.mlp(fs, 18))
        elif config.module == "conv":
            module = init.conv(fs, fs)
        else:
            module = init.mlp(fs, fs, fs)
        stages.append(StageWeights(children, backbone, halve, module,
                                   init.mlp(fs, fs, 1), init.mlp(fs, fs, 1), proj))
    return PipelineWeights(query, fcn, seg0, ref0, tuple(stages))


# -- stages --------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class StageOutputs:
    """Predictions of one stage.

    Stage 0: logits are [N_R, 14, 14] and ``features`` is the dense grid.
    Stages 1-3: logits are [N_A], one per active row of the SpsMap ``features``,
    and ``active_cells`` holds their flat grid positions.
    ``refine_map`` is a dense [N_R, H, W] map of the latest refinement score of
    every cell (inherited from the parent where no new prediction exists).
    """

    stage: int
    seg_logits: np.ndarray
    refine_logits: np.ndarray
    features: object
    grid_shape: tuple
    refine_map: np.ndarray
    active_cells: np.ndarray | None = None

    @property
    def is_dense(self):
        return self.active_cells is None


def _boxes(rois):
    return [r.box for r in rois]


def _queries(rois):
    return np.stack([r.query for r in rois])


def _head(mlp, rows):
    return mlp(rows)[..., 0]


def _record(trace, **entry):
    if trace is not None:
        trace.append(entry)


def stage0(pyramid, rois, weights, trace=None):
    """RoIAlign, query fusion, 4-layer FCN and the coarse 14x14 heads."""
    if not rois:
        raise InputError("need at least one RoI")
    n = len(rois)
    f0 = weights.query_mlp.f_out
    if pyramid.channels != f0:
        raise InputError(
            f"backbone channels C_B={pyramid.channels} must equal feature_size F_0={f0} "
            "for the stage-0 RoI features"
        )
    grid = roi_align_all(pyramid, rois, ROI_GRID, ROI_GRID)
    cells = n * ROI_GRID * ROI_GRID
    _record(trace, stage=0, name="roi_align", kind="sample", sites=4 * cells,
            dense_sites=4 * cells, channels=pyramid.channels)
    grid = sparse_ops.fuse_query(grid, _queries(rois), weights.query_mlp, trace, stage=0)
    for i, kernel in enumerate(weights.fcn):
        grid = dense_conv2d(grid, kernel)
        _record(trace, stage=0, name=f"fcn.{i}", kind="conv3x3", sites=cells,
                dense_sites=cells, f_in=kernel.f_in, f_out=kernel.f_out)
        if i < len(weights.fcn) - 1:
            grid = np.maximum(grid, 0.0)
    rows = grid.transpose(0, 2, 3, 1)
    seg = _head(weights.seg, rows)
    ref = _head(weights.refine, rows)
    for name, mlp in (("seg_head", weights.seg), ("refine_head", weights.refine)):
        _record(trace, stage=0, name=name, kind="mlp", sites=cells, dense_sites=cells,
                dims=mlp.layer_dims())
    return StageOutputs(0, seg, ref, grid, seg.shape, sigmoid(ref))


def _check_prev(prev, s):
    if prev.stage != s - 1:
        raise InputError(f"stage {s} needs outputs of stage {s - 1}, got stage {prev.stage}")


def refine_stage(prev, s, pyramid, rois, weights, k, scores=None, trace=None):
    """One sparse refinement stage; ``k=None`` selects every parent cell.

    ``scores`` overrides the parent-grid ranking scores (defaults to the
    inherited refinement map of ``prev``).
    """
    _check_prev(prev, s)
    sw = weights.stages[s - 1]
    if scores is None:
        scores = prev.refine_map
    n_parent = int(np.prod(prev.grid_shape))
    k = n_parent if k is None else int(k)
    if s == 1:
        sps = build_from_dense(prev.features, scores, k, stage=s)
    else:
        sps = update_partition(prev.features, scores, k).replace(stage=s)
    _record(trace, stage=s, name="active_set", kind="marker", sites=sps.n_active,
            dense_sites=n_parent)
    for c, mlp in enumerate(sw.children):
        _record(trace, stage=s, name=f"child{c}", kind="mlp", sites=sps.n_active,
                dense_sites=n_parent, dims=mlp.layer_dims())
    sps = upsample_split(sps, sw.children)
    sps = sparse_ops.fuse_backbone(sps, pyramid, _boxes(rois), s, sw.backbone_mlp,
                                   sw.backbone_proj, trace)
    sps = sparse_ops.halve_features(sps, sw.halve, trace, stage=s)
    sps = sparse_ops.apply_module(sps, sw.module, trace, stage=s)
    seg = _head(sw.seg, sps.active)
    ref = _head(sw.refine, sps.active)
    for name, mlp in (("seg_head", sw.seg), ("refine_head", sw.refine)):
        _record(trace, stage=s, name=name, kind="mlp", sites=sps.n_active,
                dense_sites=sps.n_cells, dims=mlp.layer_dims())
    cells = sps.active_cells()
    refine_map = upsample_nearest(prev.refine_map).copy()
    refine_map.reshape(-1)[cells] = sigmoid(ref)
    return StageOutputs(s, seg, ref, sps, sps.grid_shape, refine_map, cells)


# -- inference -----------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class MaskStack:
    """Per-RoI probability masks at 14, 28, 56 and 112 plus pasted masks and scores."""

    masks: tuple
    pasted: tuple | None = None
    s_seg: np.ndarray | None = None

    def __post_init__(self):
        sizes = tuple(m.shape[-1] for m in self.masks)
        if sizes != MASK_SIZES:
            raise InputError(f"mask resolutions must be {MASK_SIZES}, got {sizes}")

    @property
    def final(self):
        return self.masks[-1]


def assemble_masks(stages):
    """Stage-0 probabilities, then per stage: x2 nearest upsample and overwrite active cells."""
    stages = list(stages)
    if len(stages) != N_REFINE_STAGES + 1 or not stages[0].is_dense:
        raise InputError("need a dense stage 0 followed by 3 refinement stages")
    mask = sigmoid(stages[0].seg_logits)
    masks = [mask]
    for s, st in enumerate(stages[1:], 1):
        if st.stage != s or st.is_dense:
            raise InputError(f"stage chain broken at position {s}")
        expect = (mask.shape[0], 2 * mask.shape[1], 2 * mask.shape[2])
        if tuple(st.grid_shape) != expect:
            raise InputError(f"stage {s} grid {st.grid_shape} is not the x2 of {mask.shape}")
        if st.seg_logits.shape != st.active_cells.shape:
            raise InputError(f"stage {s}: {st.seg_logits.shape} logits for {st.active_cells.shape} cells")
        mask = upsample_nearest(mask).copy()
        mask.reshape(-1)[st.active_cells] = sigmoid(st.seg_logits)
        masks.append(mask)
    return MaskStack(tuple(masks))


def paste_roi(mask, box, image_size):
    """Bilinearly resample a RoI mask into an image-size map; zero outside the box."""
    mask = np.asarray(mask, dtype=float)
    bw, bh = box_size(box)
    x1, y1, x2, y2 = (float(v) for v in box)
    ih, iw = image_size
    out = np.zeros((ih, iw))
    r_lo, r_hi = max(0, int(np.ceil(y1 - 0.5))), min(ih, int(np.floor(y2 - 0.5)) + 1)
    c_lo, c_hi = max(0, int(np.ceil(x1 - 0.5))), min(iw, int(np.floor(x2 - 0.5)) + 1)
    if r_lo >= r_hi or c_lo >= c_hi:
        return out
    cy = np.arange(r_lo, r_hi) + 0.5
    cx = np.arange(c_lo, c_hi) + 0.5
    u = (cy - y1) * mask.shape[0] / bh
    v = (cx - x1) * mask.shape[1] / bw
    uu, vv = np.meshgrid(u, v, indexing="ij")
    out[r_lo:r_hi, c_lo:c_hi] = sample_map(mask[None], uu, vv)[..., 0]
    return out


def score(mask, s_cls, threshold=0.5):
    """Classification score times the mean probability over predicted foreground cells."""
    mask = np.asarray(mask, dtype=float)
    fg = mask > threshold
    if not fg.any():
        return 0.0
    return float(s_cls) * float(mask[fg].mean())


@dataclass(frozen=True, eq=False)
class PipelineResult:
    stages: tuple
    masks: MaskStack


def run_pipeline(pyramid, rois, weights, config=None, score_fn=None, image_size=None,
                 trace=None, paste=True, ks=None):
    """Full inference.

    ``score_fn(s, grid_shape)`` may force the ranking scores of stage ``s`` and
    ``ks`` the per-stage budgets; otherwise refinement scores and
    ``config.top_k`` are used.
    """
    config = config or PipelineConfig()
    rois = list(rois)
    stages = [stage0(pyramid, rois, weights, trace)]
    for s in range(1, N_REFINE_STAGES + 1):
        forced = None if score_fn is None else score_fn(s, stages[-1].grid_shape)
        k = config.top_k if ks is None else ks[s - 1]
        stages.append(refine_stage(stages[-1], s, pyramid, rois, weights, k,
                                   scores=forced, trace=trace))
    stack = assemble_masks(stages)
    final = stack.final
    s_seg = np.array([score(final[i], r.s_cls, config.mask_threshold) for i, r in enumerate(rois)])
    pasted = None
    if paste:
        size = image_size or pyramid.image_size
        pasted = tuple(paste_roi(final[i], r.box, size) for i, r in enumerate(rois))
    return PipelineResult(tuple(stages), replace(stack, pasted=pasted, s_seg=s_seg))
