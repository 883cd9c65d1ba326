import math

import numpy as np
import pytest
from conftest import constructed_weights, small_scene

from spsmask.config import PipelineConfig
from spsmask.errors import InputError
from spsmask.pipeline import StageOutputs, run_pipeline
from spsmask.shapes import Ellipse, HalfPlane, random_blob, rasterize, tight_box
from spsmask.training import bce_with_logits, eval_losses, make_targets, stage_targets


def fake_stages(value, sizes=(14, 28, 56, 112), n_active=(None, 10, 20, 30)):
    out = []
    for s, (g, k) in enumerate(zip(sizes, n_active)):
        shape = (1, g, g) if k is None else (k,)
        cells = None if k is None else np.arange(k)
        out.append(StageOutputs(s, np.full(shape, value), np.full(shape, value), None, (1, g, g),
                                np.zeros((1, g, g)), cells))
    return out


def zero_targets(stages):
    return [(np.zeros(st.seg_logits.shape), np.zeros(st.refine_logits.shape)) for st in stages]


def test_targets_all_foreground():
    seg, ref = make_targets(HalfPlane(1e9), (3.0, 4.0, 40.0, 33.0), (14, 14))
    assert seg.all() and not ref.any()


def test_targets_half_plane_column():
    seg, ref = make_targets(HalfPlane(5.5), (0.0, 0.0, 14.0, 14.0), (14, 14))
    expect = np.zeros((14, 14), np.int8)
    expect[:, 5] = 1
    np.testing.assert_array_equal(ref, expect)
    np.testing.assert_array_equal(seg[0], [1] * 5 + [0] * 9)  # center 5.5 sits on the boundary, outside
    # same boundary on a stretched box and finer grid: column 11 of 28
    seg, ref = make_targets(HalfPlane(10.0 + 11.5 * 2.0), (10.0, 0.0, 66.0, 9.0), (28, 28))
    assert np.flatnonzero(ref.any(axis=0)).tolist() == [11]
    assert ref[:, 11].all()


def rasterized_refine(gt, box, grid, res=64):
    h, w = grid
    x1, y1, x2, y2 = box
    sub = (np.arange(res) + 0.5) / res
    out = np.zeros(grid, bool)
    for i in range(h):
        ys = y1 + (i + sub) * (y2 - y1) / h
        for j in range(w):
            xs = x1 + (j + sub) * (x2 - x1) / w
            inside = gt.contains(ys[:, None], xs[None, :])
            out[i, j] = inside.any() and not inside.all()
    return out


def test_refine_targets_vs_rasterization():
    agree = total = 0
    for seed in range(4):
        rng = np.random.default_rng([seed, 7])
        gt = random_blob(rng, (256, 256))
        box = tight_box(rasterize(gt, (256, 256)))
        _, ref = make_targets(gt, box, (28, 28))
        oracle = rasterized_refine(gt, box, (28, 28))
        agree += int((ref.astype(bool) == oracle).sum())
        total += oracle.size
    assert agree / total >= 0.99


def test_targets_seg_at_centers():
    gt = Ellipse(20.0, 30.0, 8.0, 12.0)
    box = (18.0, 12.0, 42.0, 28.0)
    seg, _ = make_targets(gt, box, (4, 6))
    for i in range(4):
        for j in range(6):
            cy, cx = 12.0 + (i + 0.5) * 4, 18.0 + (j + 0.5) * 4
            assert seg[i, j] == gt.contains(cy, cx)


def test_bce_hand_value():
    assert bce_with_logits(0.3, 1.0) == pytest.approx(math.log1p(math.exp(-0.3)), abs=1e-15)
    assert bce_with_logits(0.3, 0.0) == pytest.approx(math.log1p(math.exp(0.3)), abs=1e-15)
    assert bce_with_logits(-800.0, 0.0) == 0.0  # no overflow
    assert np.isfinite(bce_with_logits(800.0, 0.0))


def test_zero_logits_loss_closed_form():
    stages = fake_stages(0.0)
    rep = eval_losses(stages, zero_targets(stages))
    assert all(v == pytest.approx(math.log(2), abs=1e-12) for v in rep.seg + rep.refine)
    assert rep.total == pytest.approx(math.log(2) * 2.5, abs=1e-9)


def test_confident_predictions():
    stages = fake_stages(-20.0)
    assert eval_losses(stages, zero_targets(stages)).total < 1e-6


def test_single_cell_loss():
    stages = fake_stages(0.0, sizes=(1, 2, 4, 8), n_active=(None, 1, 1, 1))
    targets = zero_targets(stages)
    stages[3] = StageOutputs(3, np.array([1.2]), np.array([0.0]), None, (1, 8, 8), np.zeros((1, 8, 8)), np.array([0]))
    targets[3] = (np.array([1.0]), np.array([0.0]))
    rep = eval_losses(stages, targets)
    assert rep.seg[3] == pytest.approx(math.log(1 + math.exp(-1.2)), abs=1e-12)
    expect = math.log(2) * 2.0 + 0.5 * math.log(1 + math.exp(-1.2))
    assert rep.total == pytest.approx(expect, abs=1e-12)


def test_empty_stage_contributes_zero():
    stages = fake_stages(0.0, n_active=(None, 0, 0, 0))
    rep = eval_losses(stages, zero_targets(stages))
    assert rep.seg[1:] == (0.0, 0.0, 0.0)
    assert rep.total == pytest.approx(math.log(2) * 0.5, abs=1e-12)


def test_misaligned_targets():
    stages = fake_stages(0.0)
    targets = zero_targets(stages)
    targets[2] = (np.zeros(19), targets[2][1])
    with pytest.raises(InputError, match="stage 2"):
        eval_losses(stages, targets)
    with pytest.raises(InputError):
        eval_losses(stages[:3], targets[:3])


def test_stage_targets_follow_active_cells(rng):
    f = 8
    cfg = PipelineConfig(top_k=25, feature_size=f, backbone_channels=f)
    pyramid, rois = small_scene(rng, 2, f)
    res = run_pipeline(pyramid, rois, constructed_weights(cfg, rng), cfg, paste=False)
    gts = [HalfPlane(r.box[0] + 3.3) for r in rois]
    targets = stage_targets(res.stages, gts, [r.box for r in rois])
    assert targets[0][0].shape == (2, 14, 14)
    for st, (seg, ref) in zip(res.stages[1:], targets[1:]):
        assert seg.shape == ref.shape == st.seg_logits.shape == (100,)
    rep = eval_losses(res.stages, targets)
    assert np.isfinite(rep.total)
