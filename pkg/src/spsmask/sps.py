"""Structure-preserving sparse feature maps.

An :class:`SpsMap` stores the features of an [N_R, F, H, W] grid as

* ``active``  -- [N_A, F], one row per active cell, each referenced exactly once;
* ``passive`` -- [N_P, F], deduplicated rows that may back many cells;
* ``index``   -- [N_R, H, W] integers; values below N_A point at active rows,
  values ``N_A + q`` at passive row ``q``.

Reads outside the grid return the zero padding feature. All operations return
new maps; the input is never modified.
"""

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from spsmask.errors import InputError, InvariantError
from spsmask.params import DTYPE, as_real
from spsmask.tensor import bilinear_weights, check_grid

SPS_HEADER = "# spsmask-sps v1"


@dataclass(frozen=True, eq=False)
class SpsMap:
    active: np.ndarray
    passive: np.ndarray
    index: np.ndarray
    stage: int = 0

    def __post_init__(self):
        active = as_real(self.active)
        passive = as_real(self.passive)
        index = np.ascontiguousarray(self.index, dtype=np.int64)
        if active.ndim != 2 or passive.ndim != 2 or active.shape[1] != passive.shape[1]:
            raise InputError(
                f"active {active.shape} and passive {passive.shape} must be matrices "
                "with a shared feature size"
            )
        if index.ndim != 3 or min(index.shape) < 1:
            raise InputError(f"index map must be [N_R, H, W], got {index.shape}")
        for a in (active, passive, index):
            a.setflags(write=False)
        object.__setattr__(self, "active", active)
        object.__setattr__(self, "passive", passive)
        object.__setattr__(self, "index", index)

    @property
    def n_active(self):
        return self.active.shape[0]

    @property
    def n_passive(self):
        return self.passive.shape[0]

    @property
    def n_features(self):
        return self.active.shape[1]

    @property
    def grid_shape(self):
        return self.index.shape

    @property
    def n_cells(self):
        return self.index.size

    @property
    def pad_index(self):
        return self.n_active + self.n_passive

    def table(self):
        """Stacked [active; passive; zero padding] feature rows."""
        return np.vstack([self.active, self.passive, np.zeros((1, self.n_features), DTYPE)])

    def active_cells(self):
        """Flat cell position (roi-major, row-major) of each active row, in row order."""
        flat = self.index.ravel()
        where = np.flatnonzero(flat < self.n_active)
        pos = np.empty(self.n_active, dtype=np.int64)
        pos[flat[where]] = where
        return pos

    def active_coords(self):
        return np.unravel_index(self.active_cells(), self.grid_shape)

    def active_mask(self):
        return self.index < self.n_active

    def replace(self, **changes):
        fields = dict(active=self.active, passive=self.passive, index=self.index, stage=self.stage)
        fields.update(changes)
        return SpsMap(**fields)


def validate(sps):
    """Check every SpsMap invariant; raises :class:`InvariantError` naming the first failure."""
    n_a, n_p = sps.n_active, sps.n_passive
    flat = sps.index.ravel()
    if flat.size and (flat.min() < 0 or flat.max() >= n_a + n_p):
        raise InvariantError(
            "index-range", f"index values must lie in [0, {n_a + n_p}), "
            f"found [{flat.min()}, {flat.max()}]"
        )
    counts = np.bincount(flat, minlength=n_a + n_p)
    bad = np.flatnonzero(counts[:n_a] != 1)
    if bad.size:
        raise InvariantError(
            "active-uniqueness",
            f"active row {bad[0]} referenced {counts[bad[0]]} times (expected exactly once)",
        )
    orphans = np.flatnonzero(counts[n_a:] == 0)
    if orphans.size:
        raise InvariantError("no-orphan-passive", f"passive row {orphans[0]} is never referenced")
    if n_a + n_p > sps.n_cells:
        raise InvariantError(
            "storage-bound", f"{n_a + n_p} stored rows exceed {sps.n_cells} grid cells"
        )
    if not (np.isfinite(sps.active).all() and np.isfinite(sps.passive).all()):
        raise InvariantError("finite", "feature matrices contain non-finite values")
    return True


def _check_scores(scores, shape):
    scores = np.asarray(scores, dtype=DTYPE)
    if scores.shape != tuple(shape):
        raise InputError(f"scores layout {scores.shape} does not match grid {tuple(shape)}")
    return scores


def top_k_cells(scores, k):
    """Flat positions of the ``k`` highest scores, descending; ties by ascending position."""
    if k < 0:
        raise InputError(f"K must be >= 0, got {k}")
    flat = np.asarray(scores).ravel()
    order = np.argsort(-flat, kind="stable")
    return order[: min(int(k), flat.size)]


def build_from_dense(dense, scores, k, stage=1):
    """Split a dense [N_R, F, H, W] grid into K active cells and per-cell passive rows."""
    dense = check_grid(dense, "dense")
    n, f, h, w = dense.shape
    scores = _check_scores(scores, (n, h, w))
    rows = dense.transpose(0, 2, 3, 1).reshape(-1, f)
    selected = top_k_cells(scores, k)
    is_active = np.zeros(rows.shape[0], dtype=bool)
    is_active[selected] = True
    passive_cells = np.flatnonzero(~is_active)
    n_a = selected.size
    index = np.empty(rows.shape[0], dtype=np.int64)
    index[selected] = np.arange(n_a)
    index[passive_cells] = n_a + np.arange(passive_cells.size)
    return SpsMap(rows[selected], rows[passive_cells], index.reshape(n, h, w), stage)


def update_partition(sps, scores, k):
    """Re-select the top-K cells of an existing map as its new active set.

    Selected cells each get their own active row (materialised from whatever
    they referenced); every feature still referenced by an unselected cell is
    kept once as a passive row, ordered by first reference in flat cell order.
    """
    scores = _check_scores(scores, sps.grid_shape)
    flat = sps.index.ravel()
    table = sps.table()
    selected = top_k_cells(scores, k)
    is_active = np.zeros(flat.size, dtype=bool)
    is_active[selected] = True
    unsel_cells = np.flatnonzero(~is_active)
    old = flat[unsel_cells]
    uniq, first = np.unique(old, return_index=True)
    kept = uniq[np.argsort(first, kind="stable")]
    remap = np.full(sps.pad_index, -1, dtype=np.int64)
    n_a = selected.size
    remap[kept] = n_a + np.arange(kept.size)
    index = np.empty(flat.size, dtype=np.int64)
    index[selected] = np.arange(n_a)
    index[unsel_cells] = remap[old]
    return SpsMap(table[flat[selected]], table[kept], index.reshape(sps.grid_shape), sps.stage)


def upsample_split(sps, child_mlps):
    """Double the grid; active parents spawn four new rows via one MLP per child.

    Child ``c = 2 * a + b`` is the cell (2i + a, 2j + b). Passive parents hand
    their index to all four children and the passive matrix is kept as is.
    """
    child_mlps = tuple(child_mlps)
    f = sps.n_features
    if len(child_mlps) != 4:
        raise InputError(f"need 4 child MLPs, got {len(child_mlps)}")
    for c, mlp in enumerate(child_mlps):
        if mlp.f_in != f or mlp.f_out != f:
            raise InputError(f"child MLP {c} must map {f} -> {f}, got {mlp.f_in} -> {mlp.f_out}")
    n_a = sps.n_active
    children = np.stack([mlp(sps.active) for mlp in child_mlps], axis=1) if n_a else None
    active = children.reshape(4 * n_a, f) if n_a else np.zeros((0, f), DTYPE)

    parent = sps.index
    n, h, w = parent.shape
    new_index = np.empty((n, 2 * h, 2 * w), dtype=np.int64)
    is_act = parent < n_a
    for a in (0, 1):
        for b in (0, 1):
            c = 2 * a + b
            new_index[:, a::2, b::2] = np.where(is_act, 4 * parent + c, parent + 3 * n_a)
    return SpsMap(active, sps.passive, new_index, sps.stage)


def neighbor_indices(sps, rois, rows, cols, offsets):
    """Table indices [N, T] of the cells at ``offsets`` around each given cell."""
    offsets = np.asarray(offsets, dtype=np.int64).reshape(-1, 2)
    _, h, w = sps.grid_shape
    rr = np.asarray(rows)[:, None] + offsets[None, :, 0]
    cc = np.asarray(cols)[:, None] + offsets[None, :, 1]
    ok = (rr >= 0) & (rr < h) & (cc >= 0) & (cc < w)
    nn = np.broadcast_to(np.asarray(rois)[:, None], rr.shape)
    idx = sps.index[nn, np.where(ok, rr, 0), np.where(ok, cc, 0)]
    return np.where(ok, idx, sps.pad_index)


def gather_neighborhood(sps, cell, offsets):
    """Features [len(offsets), F] around ``cell = (roi, row, col)``; zeros off-grid."""
    r, i, j = cell
    n, h, w = sps.grid_shape
    if not (0 <= r < n and 0 <= i < h and 0 <= j < w):
        raise InputError(f"cell {cell} outside grid {sps.grid_shape}")
    idx = neighbor_indices(sps, np.array([r]), np.array([i]), np.array([j]), offsets)
    return sps.table()[idx[0]]


def gather_points(sps, rois, rows, cols, table=None):
    """Bilinear reads at continuous points through the index map; returns [..., F]."""
    if table is None:
        table = sps.table()
    _, h, w = sps.grid_shape
    r0, c0, wts = bilinear_weights(rows, cols)
    rois = np.broadcast_to(np.asarray(rois), r0.shape)
    out = np.zeros(r0.shape + (sps.n_features,), dtype=DTYPE)
    for a in (0, 1):
        for b in (0, 1):
            r = r0 + a
            c = c0 + b
            ok = (r >= 0) & (r < h) & (c >= 0) & (c < w)
            idx = np.where(ok, sps.index[rois, np.where(ok, r, 0), np.where(ok, c, 0)], sps.pad_index)
            out += wts[..., 2 * a + b, None] * table[idx]
    return out


def gather_bilinear(sps, roi, point):
    row, col = point
    return gather_points(sps, np.asarray(roi), np.asarray(row, dtype=DTYPE), np.asarray(col, dtype=DTYPE))


def scatter_update(sps, new_active):
    """Replace the active rows; index map and passive rows are shared, not copied."""
    new_active = as_real(new_active)
    if new_active.ndim != 2 or new_active.shape[0] != sps.n_active:
        raise InputError(
            f"scatter needs {sps.n_active} active rows, got {new_active.shape}"
        )
    if new_active.shape[1] != sps.n_features and sps.n_passive:
        raise InputError(
            f"feature size {new_active.shape[1]} != {sps.n_features}; changing F requires "
            "updating the passive rows as well"
        )
    passive = sps.passive
    if new_active.shape[1] != sps.n_features:
        passive = np.zeros((0, new_active.shape[1]), DTYPE)
    return SpsMap(new_active, passive, sps.index, sps.stage)


def to_dense(sps):
    """Materialise the [N_R, F, H, W] grid the map represents."""
    return sps.table()[sps.index].transpose(0, 3, 1, 2).copy()


# -- debug text serialisation --------------------------------------------------

def _csv_rows(matrix, fmt):
    return [",".join(fmt(v) for v in row) for row in matrix]


def format_sps(sps):
    n, h, w = sps.grid_shape
    lines = [
        SPS_HEADER,
        f"shape n_roi={n} height={h} width={w} features={sps.n_features} "
        f"n_active={sps.n_active} n_passive={sps.n_passive} stage={sps.stage}",
    ]
    for r in range(n):
        lines.append(f"[index roi={r}]")
        lines.extend(_csv_rows(sps.index[r], str))
    lines.append("[active]")
    lines.extend(_csv_rows(sps.active, lambda v: repr(float(v))))
    lines.append("[passive]")
    lines.extend(_csv_rows(sps.passive, lambda v: repr(float(v))))
    return "\n".join(lines) + "\n"


def parse_sps(text):
    lines = [ln.strip() for ln in text.splitlines() if ln.strip()]
    if not lines or lines[0] != SPS_HEADER:
        raise InputError(f"missing '{SPS_HEADER}' header")
    meta = dict(kv.split("=") for kv in lines[1].split()[1:])
    n, h, w, f = (int(meta[k]) for k in ("n_roi", "height", "width", "features"))
    n_a, n_p = int(meta["n_active"]), int(meta["n_passive"])
    sections = {}
    current = None
    for ln in lines[2:]:
        if ln.startswith("["):
            current = ln
            sections[current] = []
        else:
            sections[current].append(ln)
    index = np.array(
        [[[int(v) for v in row.split(",")] for row in sections[f"[index roi={r}]"]] for r in range(n)],
        dtype=np.int64,
    ).reshape(n, h, w)

    def matrix(name, rows):
        data = [[float(v) for v in row.split(",")] for row in sections.get(name, [])]
        return np.array(data, dtype=DTYPE).reshape(rows, f)

    return SpsMap(matrix("[active]", n_a), matrix("[passive]", n_p), index, int(meta["stage"]))


def save_sps(sps, path):
    Path(path).write_text(format_sps(sps))


def load_sps(path):
    return parse_sps(Path(path).read_text())
