"""Training targets and forward loss evaluation (no gradients)."""

from dataclasses import dataclass

import numpy as np

from spsmask.errors import InputError
from spsmask.tensor import box_size

SEG_LOSS_WEIGHTS = (0.25, 0.375, 0.375, 0.5)
REFINE_LOSS_WEIGHTS = (0.25, 0.25, 0.25, 0.25)
PROBE = 7


def make_targets(gt, box, grid, probe=PROBE):
    """Per-cell segmentation and refinement targets for an h x w subdivision of ``box``.

    The segmentation target is the ground truth at the cell center; the
    refinement target is 1 when a ``probe`` x ``probe`` lattice spanning the
    closed cell (corners and edges included) sees both foreground and background.
    """
    h, w = grid
    bw, bh = box_size(box)
    x1, y1 = float(box[0]), float(box[1])
    cy = y1 + (np.arange(h) + 0.5) * bh / h
    cx = x1 + (np.arange(w) + 0.5) * bw / w
    seg = gt.contains(cy[:, None], cx[None, :]).astype(np.int8)

    # edge points catch boundaries that hug a cell side
    sub = np.arange(probe) / (probe - 1)
    py = y1 + (np.arange(h)[:, None] + sub[None, :]) / h * bh  # [h, p]
    px = x1 + (np.arange(w)[:, None] + sub[None, :]) / w * bw  # [w, p]
    inside = gt.contains(py[:, None, :, None], px[None, :, None, :])  # [h, w, p, p]
    fg = inside.any(axis=(2, 3))
    bg = (~inside).any(axis=(2, 3))
    return seg, (fg & bg).astype(np.int8)


def stage_targets(stages, gts, boxes):
    """Targets aligned with each stage's predictions (active cells only after stage 0)."""
    out = []
    for st in stages:
        n, h, w = st.grid_shape
        seg = np.empty((n, h, w), np.int8)
        ref = np.empty((n, h, w), np.int8)
        for r in range(n):
            seg[r], ref[r] = make_targets(gts[r], boxes[r], (h, w))
        if st.is_dense:
            out.append((seg, ref))
        else:
            out.append((seg.reshape(-1)[st.active_cells], ref.reshape(-1)[st.active_cells]))
    return out


def bce_with_logits(logits, targets):
    """Elementwise binary cross-entropy, stable for large |logits|."""
    x = np.asarray(logits, dtype=float)
    t = np.asarray(targets, dtype=float)
    return np.maximum(x, 0.0) - x * t + np.log1p(np.exp(-np.abs(x)))


@dataclass(frozen=True)
class LossReport:
    seg: tuple
    refine: tuple
    total: float


def _mean_bce(logits, targets, what):
    if np.shape(logits) != np.shape(targets):
        raise InputError(f"{what}: targets {np.shape(targets)} do not match predictions {np.shape(logits)}")
    if np.size(logits) == 0:
        return 0.0
    return float(bce_with_logits(logits, targets).mean())


def eval_losses(stages, targets):
    """Per-stage mean BCE losses and the weighted total over the four stages."""
    stages = list(stages)
    if len(stages) != len(SEG_LOSS_WEIGHTS) or len(targets) != len(stages):
        raise InputError(f"need {len(SEG_LOSS_WEIGHTS)} stages and matching targets")
    seg, ref = [], []
    for st, (seg_t, ref_t) in zip(stages, targets):
        seg.append(_mean_bce(st.seg_logits, seg_t, f"stage {st.stage} seg"))
        ref.append(_mean_bce(st.refine_logits, ref_t, f"stage {st.stage} refine"))
    total = sum(w * l for w, l in zip(SEG_LOSS_WEIGHTS, seg))
    total += sum(w * l for w, l in zip(REFINE_LOSS_WEIGHTS, ref))
    return LossReport(tuple(seg), tuple(ref), float(total))
