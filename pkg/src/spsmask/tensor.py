"""Dense feature grids, bilinear sampling, RoIAlign and pyramid level selection.

Dense grids are plain arrays of shape [N_R, F, H, W]. Continuous points are
given as (row, col) with cell (i, j) centered at (i + 0.5, j + 0.5); anything
read outside the grid is zero.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from spsmask.errors import InputError
from spsmask.params import DTYPE, as_real

MIN_LEVEL = 2
MAX_LEVEL = 7
CANONICAL_SIZE = 56.0
ROI_ALIGN_SAMPLING = 2


def check_grid(grid, name="grid"):
    grid = np.asarray(grid)
    if grid.ndim != 4 or min(grid.shape) < 1:
        raise InputError(f"{name} must be [N_R, F, H, W] with all dims >= 1, got {grid.shape}")
    if not np.isfinite(grid).all():
        raise InputError(f"{name} contains non-finite values")
    return grid


def box_size(box):
    x1, y1, x2, y2 = (float(v) for v in box)
    w, h = x2 - x1, y2 - y1
    if not (w > 0 and h > 0) or not all(math.isfinite(v) for v in (x1, y1, x2, y2)):
        raise InputError(f"degenerate box {tuple(box)}: width and height must be > 0")
    return w, h


@dataclass(frozen=True)
class RoiDetection:
    box: tuple
    s_cls: float
    query: np.ndarray

    def __post_init__(self):
        box_size(self.box)
        object.__setattr__(self, "box", tuple(float(v) for v in self.box))
        if not 0.0 <= float(self.s_cls) <= 1.0:
            raise InputError(f"s_cls must lie in [0, 1], got {self.s_cls}")
        object.__setattr__(self, "query", as_real(self.query).ravel())

    @property
    def width(self):
        return self.box[2] - self.box[0]

    @property
    def height(self):
        return self.box[3] - self.box[1]


@dataclass(frozen=True)
class FeaturePyramid:
    """Backbone levels P2..P7; level k is an array [C_B, ceil(H / 2^k), ceil(W / 2^k)]."""

    image_size: tuple
    levels: dict = field(repr=False)

    def __post_init__(self):
        ih, iw = (int(v) for v in self.image_size)
        levels = {int(k): as_real(v) for k, v in self.levels.items()}
        if sorted(levels) != list(range(MIN_LEVEL, MAX_LEVEL + 1)):
            raise InputError(f"pyramid needs levels {MIN_LEVEL}..{MAX_LEVEL}, got {sorted(levels)}")
        channels = {v.shape[0] for v in levels.values()}
        if len(channels) != 1:
            raise InputError(f"all pyramid levels must share channel count, got {sorted(channels)}")
        for k, v in levels.items():
            expect = (-(-ih // 2**k), -(-iw // 2**k))
            if v.ndim != 3 or v.shape[1:] != expect:
                raise InputError(f"level P{k} must be [C, {expect[0]}, {expect[1]}], got {v.shape}")
        object.__setattr__(self, "image_size", (ih, iw))
        object.__setattr__(self, "levels", levels)

    @property
    def channels(self):
        return self.levels[MIN_LEVEL].shape[0]

    @staticmethod
    def stride(k):
        return 2**k

    @classmethod
    def random(cls, image_size, channels, rng):
        ih, iw = image_size
        levels = {
            k: rng.standard_normal((channels, -(-ih // 2**k), -(-iw // 2**k)))
            for k in range(MIN_LEVEL, MAX_LEVEL + 1)
        }
        return cls((ih, iw), levels)

    @classmethod
    def constant(cls, image_size, channels, value):
        ih, iw = image_size
        levels = {
            k: np.full((channels, -(-ih // 2**k), -(-iw // 2**k)), float(value))
            for k in range(MIN_LEVEL, MAX_LEVEL + 1)
        }
        return cls((ih, iw), levels)


def level_select_initial(w, h):
    """Pyramid level for a box of size (w, h): canonical 56 px boxes map to P2."""
    if not (w > 0 and h > 0):
        raise InputError(f"degenerate box size ({w}, {h})")
    k0 = 2 + min(math.floor(math.log2(math.sqrt(w * h) / CANONICAL_SIZE)), 3)
    return max(MIN_LEVEL, min(MAX_LEVEL, k0))


def level_select_stage(k0, s):
    """Stage s reads one level finer per stage, never below P2."""
    return max(k0 - s, MIN_LEVEL)


def roi_levels(box, n_stages=4):
    w, h = box_size(box)
    k0 = level_select_initial(w, h)
    return [level_select_stage(k0, s) for s in range(n_stages)]


def bilinear_weights(rows, cols):
    """Neighbour cells and weights for continuous points.

    Returns (r0, c0, wts) where the four neighbours are (r0 + a, c0 + b) for
    a, b in {0, 1} with weights ``wts[..., 2 * a + b]``.
    """
    u = np.asarray(rows, dtype=DTYPE) - 0.5
    v = np.asarray(cols, dtype=DTYPE) - 0.5
    r0 = np.floor(u)
    c0 = np.floor(v)
    fr = u - r0
    fc = v - c0
    wts = np.stack(
        [(1 - fr) * (1 - fc), (1 - fr) * fc, fr * (1 - fc), fr * fc], axis=-1
    )
    return r0.astype(np.int64), c0.astype(np.int64), wts


def sample_map(fmap, rows, cols):
    """Bilinearly sample a [F, H, W] map at points; returns [..., F]."""
    fmap = np.asarray(fmap)
    _, h, w = fmap.shape
    r0, c0, wts = bilinear_weights(rows, cols)
    out = np.zeros(r0.shape + (fmap.shape[0],), dtype=DTYPE)
    for a in (0, 1):
        for b in (0, 1):
            r = r0 + a
            c = c0 + b
            ok = (r >= 0) & (r < h) & (c >= 0) & (c < w)
            vals = fmap[:, np.where(ok, r, 0), np.where(ok, c, 0)]
            vals = np.moveaxis(vals, 0, -1) * ok[..., None]
            out += wts[..., 2 * a + b, None] * vals
    return out


def bilinear_sample(grid, roi, point):
    """Feature vector of ``grid[roi]`` at continuous ``point = (row, col)``."""
    grid = check_grid(grid)
    row, col = point
    return sample_map(grid[roi], np.asarray(row), np.asarray(col))


def roi_align_points(box, level, out_h, out_w, sampling=ROI_ALIGN_SAMPLING):
    """Sample points (level coordinates) for RoIAlign, shape [out_h, out_w, s*s]."""
    stride = 2.0**level
    x1, y1, x2, y2 = (float(v) / stride for v in box)
    bin_h = (y2 - y1) / out_h
    bin_w = (x2 - x1) / out_w
    sub = (np.arange(sampling) + 0.5) / sampling
    ys = y1 + (np.arange(out_h)[:, None] + sub[None, :]) * bin_h  # [out_h, s]
    xs = x1 + (np.arange(out_w)[:, None] + sub[None, :]) * bin_w  # [out_w, s]
    rows = np.broadcast_to(ys[:, None, :, None], (out_h, out_w, sampling, sampling))
    cols = np.broadcast_to(xs[None, :, None, :], (out_h, out_w, sampling, sampling))
    return rows.reshape(out_h, out_w, -1), cols.reshape(out_h, out_w, -1)


def roi_align(pyramid, roi, out_h=14, out_w=14):
    """Pool a RoI into a [C_B, out_h, out_w] grid from the pyramid level matching its size."""
    box = roi.box if isinstance(roi, RoiDetection) else roi
    w, h = box_size(box)
    level = level_select_initial(w, h)
    rows, cols = roi_align_points(box, level, out_h, out_w)
    samples = sample_map(pyramid.levels[level], rows, cols)  # [oh, ow, s*s, C]
    return samples.mean(axis=2).transpose(2, 0, 1)


def roi_align_all(pyramid, rois, out_h=14, out_w=14):
    return np.stack([roi_align(pyramid, r, out_h, out_w) for r in rois])


def dense_conv2d(grid, kernel):
    """Zero-padded 3x3 cross-correlation at the kernel's dilation, size preserving."""
    grid = check_grid(grid)
    n, f, h, w = grid.shape
    if f != kernel.f_in:
        raise InputError(f"kernel expects {kernel.f_in} input channels, grid has {f}")
    d = kernel.dilation
    # channels-last so each tap is one BLAS matmul
    padded = np.zeros((n, h + 2 * d, w + 2 * d, f), dtype=DTYPE)
    padded[:, d : d + h, d : d + w, :] = grid.transpose(0, 2, 3, 1)
    out = np.zeros((n * h * w, kernel.f_out), dtype=DTYPE)
    for ky in range(3):
        for kx in range(3):
            window = padded[:, ky * d : ky * d + h, kx * d : kx * d + w, :].reshape(-1, f)
            out += window @ np.ascontiguousarray(kernel.weight[:, :, ky, kx].T)
    out += kernel.bias
    return out.reshape(n, h, w, kernel.f_out).transpose(0, 3, 1, 2)


def upsample_nearest(a, factor=2):
    """Nearest-neighbour upsampling over the last two axes."""
    a = np.asarray(a)
    return a.repeat(factor, axis=-2).repeat(factor, axis=-1)


def cell_centers(box, h, w):
    """Image-space (row, col) centers of an h x w subdivision of ``box``; each [h, w]."""
    bw, bh = box_size(box)
    x1, y1 = float(box[0]), float(box[1])
    ys = y1 + (np.arange(h) + 0.5) * bh / h
    xs = x1 + (np.arange(w) + 0.5) * bw / w
    return np.broadcast_to(ys[:, None], (h, w)), np.broadcast_to(xs[None, :], (h, w))
